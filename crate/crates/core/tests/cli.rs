mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

use metricopt::cli::read_lengths_csv;
use metricopt::mesh::{load_off, write_off, Mesh};
use metricopt::metric::{check_feasible, MetricField};

const TETRAHEDRON: &str = "OFF\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n";

fn metricopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metricopt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_column(text: &str, column: usize) -> Vec<f64> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn validate_tetrahedron_and_glued_pair() {
    let dir = tempfile::tempdir().unwrap();
    let tet = dir.path().join("tet.off");
    std::fs::write(&tet, TETRAHEDRON).unwrap();
    let out = metricopt(&["validate", "--mesh", path_str(&tet)]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("euler 2"), "{stdout}");
    assert!(!stdout.contains("violation"));

    // Two tetrahedra sharing edge 0-1 plus two more faces on it.
    let glued = dir.path().join("glued.off");
    std::fs::write(
        &glued,
        "OFF\n6 6 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n0 -1 0\n0 0 -1\n3 0 1 2\n3 0 1 3\n3 0 1 4\n3 0 1 5\n3 2 3 0\n3 4 5 0\n",
    )
    .unwrap();
    let out = metricopt(&["validate", "--mesh", path_str(&glued)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("violation"));

    let broken = dir.path().join("broken.off");
    std::fs::write(&broken, "OFF\n3 1 0\n0 0 0\n1 0 0\n").unwrap();
    assert_eq!(metricopt(&["validate", "--mesh", path_str(&broken)]).status.code(), Some(1));
}

#[test]
fn generate_then_curvature_of_unit_icosahedron() {
    let dir = tempfile::tempdir().unwrap();
    let off = dir.path().join("ico.off");
    let out = metricopt(&["generate", "--kind", "icosphere:0", "--out", path_str(&off)]);
    assert_eq!(out.status.code(), Some(0));
    let (mesh, _) = load_off(&std::fs::read_to_string(&off).unwrap()).unwrap();

    // Unit edge lengths through a lengths CSV.
    let lengths = dir.path().join("unit.csv");
    let mut text = String::from("edge_id,v0,v1,length\n");
    for (e, [a, b]) in mesh.edges().iter().enumerate() {
        text.push_str(&format!("{e},{a},{b},1\n"));
    }
    std::fs::write(&lengths, text).unwrap();
    let out = metricopt(&["curvature", "--mesh", path_str(&off), "--lengths", path_str(&lengths)]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("vertex_id,defect,vertex_area\n"));
    let defects = csv_column(&stdout, 1);
    assert_eq!(defects.len(), 12);
    for d in defects {
        assert!((d - PI / 3.0).abs() < 1e-12);
    }

    let target = dir.path().join("curv");
    let out = metricopt(&["curvature", "--mesh", path_str(&off), "--from-embedding", "--out", path_str(&target)]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(target.join("curvature.csv")).unwrap();
    let total: f64 = csv_column(&csv, 1).iter().sum();
    assert!((total - 4.0 * PI).abs() < 1e-12);
    assert!(target.join("manifest.txt").is_file());

    // Exactly one length source is required.
    assert_eq!(metricopt(&["curvature", "--mesh", path_str(&off)]).status.code(), Some(1));
}

#[test]
fn geodesic_on_a_flat_grid() {
    let dir = tempfile::tempdir().unwrap();
    let off = dir.path().join("grid.off");
    metricopt(&["generate", "--kind", "grid:5,5,1", "--out", path_str(&off)]);
    let (mesh, emb) = load_off(&std::fs::read_to_string(&off).unwrap()).unwrap();
    let lengths = dir.path().join("lengths.csv");
    let mut buf = Vec::new();
    metricopt::cli::write_lengths_csv(&mesh, &MetricField::from_embedding(&mesh, &emb), &mut buf).unwrap();
    std::fs::write(&lengths, buf).unwrap();

    let out = metricopt(&[
        "geodesic",
        "--mesh",
        path_str(&off),
        "--lengths",
        path_str(&lengths),
        "--source",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let d = csv_column(&String::from_utf8(out.stdout).unwrap(), 1);
    assert_eq!(d[0], 0.0);
    assert!((d[4] - 4.0).abs() < 1e-12);
    assert!((d[24] - 32f64.sqrt()).abs() < 1e-12);

    let out = metricopt(&[
        "geodesic",
        "--mesh",
        path_str(&off),
        "--lengths",
        path_str(&lengths),
        "--source",
        "99",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    common::write_points_csv(&dir.join("points.csv"), &common::ellipsoid_points(40, [1.0, 1.0, 2.0], 3));
    let config = dir.join("run.cfg");
    std::fs::write(
        &config,
        format!("# sphere fitted to an ellipsoid\ngenerate = icosphere:1\ndataset = points.csv\nscale = 1.26\njitter = 0.05\nseed = 11\n{extra}"),
    )
    .unwrap();
    config
}

#[test]
fn optimize_writes_the_output_set() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "lambda = 0.01\nmax_iters = 15\noutput_dir = out\n");
    let out = metricopt(&["optimize", "--config", path_str(&config)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    for name in ["lengths.csv", "curvature.csv", "trace.csv", "final.off", "manifest.txt", "projections.csv"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let off = std::fs::read_to_string(run.join("final.off")).unwrap();
    let (mesh, emb) = load_off(&off).unwrap();
    assert_eq!(mesh.face_count(), 80);
    assert_eq!(write_off(&mesh, &emb), off);

    let file = std::fs::File::open(run.join("lengths.csv")).unwrap();
    let metric = read_lengths_csv(&mesh, file).unwrap();
    assert_eq!(metric.len(), mesh.edge_count());
    assert!(check_feasible(&mesh, metric.lengths(), 0.0).is_empty());

    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,eta,L_data,L_curv,L_dirichlet,L_vol,L_iso,L_total,max_deficit,grad_norm\n"));
    let totals = csv_column(&trace, 7);
    assert!(totals.windows(2).all(|w| w[1] <= w[0]));

    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 11"));
    assert!(manifest.contains("lambda = 0.01"));
    assert!(manifest.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn zero_iterations_emit_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "max_iters = 0\noutput_dir = out\n");
    assert_eq!(metricopt(&["optimize", "--config", path_str(&config)]).status.code(), Some(0));
    let trace = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let off = std::fs::read_to_string(dir.path().join("out/final.off")).unwrap();
    let (mesh, _): (Mesh, _) = load_off(&off).unwrap();
    let lengths = std::fs::read_to_string(dir.path().join("out/lengths.csv")).unwrap();
    assert_eq!(lengths.lines().count(), mesh.edge_count() + 1);
}

#[test]
fn identical_configs_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "lambda = 0.1\nmax_iters = 10\noutput_dir = out\n");
    let read_all = || {
        assert_eq!(metricopt(&["optimize", "--config", path_str(&config)]).status.code(), Some(0));
        ["lengths.csv", "curvature.csv", "trace.csv", "final.off", "manifest.txt"]
            .map(|n| std::fs::read(dir.path().join("out").join(n)).unwrap())
    };
    assert_eq!(read_all(), read_all());
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "max_iters = 20\noutput_dir = sweep\n");
    let out = metricopt(&["sweep", "--config", path_str(&config), "--lambdas", "0.01,0.1,1,10"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv_column(&csv, 0), vec![0.01, 0.1, 1.0, 10.0]);
    let header = csv.lines().next().unwrap();
    for col in ["defect_mean", "defect_var", "volume"] {
        assert!(header.contains(col));
    }

    let out = metricopt(&["sweep", "--config", path_str(&config), "--lambdas", "1,0.1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_one_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "generate = icosphere:0\nunknown_key = 3\n").unwrap();
    let out = metricopt(&["optimize", "--config", path_str(&config)]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("line 2") && stderr.contains("unknown_key"), "{stderr}");

    std::fs::write(&config, "generate = icosphere:0\nlambda = -1\n").unwrap();
    assert_eq!(metricopt(&["optimize", "--config", path_str(&config)]).status.code(), Some(1));

    std::fs::write(&config, "mesh = missing.off\n").unwrap();
    assert_eq!(metricopt(&["optimize", "--config", path_str(&config)]).status.code(), Some(1));

    assert_eq!(metricopt(&["optimize", "--config", "/nonexistent/run.cfg"]).status.code(), Some(2));
}
