use ksinv::diagnostics::{check_result, level_density};
use ksinv::inversion::{invert, InversionParams};
use ksinv::io::{read_field_bin, read_field_csv, read_log_csv, write_field, write_json, LogWriter};
use ksinv::{Boundary, Field, Grid};

fn excited_target() -> (Grid, Field, InversionParams) {
    let grid = Grid::new(1, 6.0, 127, Boundary::Dirichlet).unwrap();
    let v = Field::from_fn(grid, |x| 0.3 * x[0] * x[0] + 0.5 * (2.0 * x[0]).sin());
    let params = InversionParams { epsilon: 1e-7, ..Default::default() };
    let rho = level_density(&grid, &v, 3, 1, &params).unwrap();
    (grid, rho, params)
}

#[test]
fn excited_level_density_is_recovered() {
    let (grid, rho, params) = excited_target();
    let result = invert(&grid, &rho, 3, 1, &params, None, None).unwrap();
    assert!(result.converged, "distance {}", result.distance);
    assert!(result.distance <= 1e-7);
    assert_eq!(result.log.len(), result.iterations + 1);
    let report = check_result(&result, &rho, 3, 1, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn run_artifacts_round_trip() {
    let (grid, rho, params) = excited_target();
    let params = InversionParams { max_outer: 10, ..params };
    let result = invert(&grid, &rho, 3, 1, &params, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();

    write_field(dir.path(), "v_final", &result.potential).unwrap();
    let csv = read_field_csv(&dir.path().join("v_final.csv"), &grid).unwrap();
    let bin = read_field_bin(&dir.path().join("v_final.bin"), &grid).unwrap();
    assert_eq!(bin.values(), result.potential.values());
    assert!(csv.sub(&result.potential).unwrap().norm() <= 1e-12 * result.potential.norm());

    let path = dir.path().join("log.csv");
    let mut writer = LogWriter::create(&path).unwrap();
    for row in &result.log {
        writer.write(row).unwrap();
    }
    let rows = read_log_csv(&path).unwrap();
    assert_eq!(rows.len(), result.log.len());
    for (a, b) in rows.iter().zip(&result.log) {
        assert_eq!(a.iteration, b.iteration);
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.level_dim, b.level_dim);
    }

    let path = dir.path().join("degeneracy.json");
    write_json(&path, &result.degeneracy).unwrap();
    let back: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back["dimension"], result.degeneracy.dimension);
}
