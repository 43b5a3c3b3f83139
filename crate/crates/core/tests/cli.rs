use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use equinorm::io::{read_report, read_tensor};
use equinorm::metrics::Group;

fn equinorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equinorm")).args(args).env_remove("EQUINORM_SEED").output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn measure_shift_clusters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(tmp.path(), "r.csv");
    let o = equinorm(&[
        "measure",
        "--layers",
        "all",
        "--groups",
        "shift",
        "--synthetic",
        "2,4,16,16",
        "--trials",
        "64",
        "--seed",
        "1",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_report(&out).unwrap();
    assert_eq!(report.cells.len(), 5);
    let names: Vec<&str> = report.cells.iter().map(|c| c.layer.as_str()).collect();
    assert_eq!(names, ["BatchNorm", "InstanceNorm", "LayerNorm-CHW", "LayerNorm-C", "LayerNorm-AF"]);
    for c in &report.cells {
        assert_eq!(c.group, Group::Shift);
        assert_eq!(c.n, 64);
        if c.layer == "LayerNorm-CHW" {
            assert!(c.mean >= 1e-2, "{c:?}");
        } else {
            assert!(c.mean <= 1e-10, "{c:?}");
        }
    }
    assert!(tmp.path().join("r.json").exists());
}

#[test]
fn gen_zero_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = path(tmp.path(), "maps");
    let o = equinorm(&["gen", "--dims", "1,2,4,4", "--n", "0", "--out", &dir]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(&dir).unwrap().count(), 0);
}

#[test]
fn gen_writes_readable_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = path(tmp.path(), "maps");
    let o = equinorm(&["gen", "--dims", "1,2,4,6", "--n", "2", "--precision", "f32", "--out", &dir]);
    assert!(o.status.success());
    let x = read_tensor(Path::new(&dir).join("map_0001.eqtn")).unwrap();
    assert_eq!(x.dims(), [1, 2, 4, 6]);
    assert!(x.data().iter().all(|v| (*v as f32) as f64 == *v));
}

#[test]
fn seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, extra: &[&str], name: &str| {
        let out = path(tmp.path(), name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_equinorm"));
        cmd.args(["gen", "--dims", "1,1,4,4", "--n", "1", "--out", &out]).args(extra).env_remove("EQUINORM_SEED");
        if let Some(s) = env {
            cmd.env("EQUINORM_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(Path::new(&out).join("map_0000.eqtn")).unwrap()
    };
    let default = run(None, &[], "a");
    let env7 = run(Some("7"), &[], "b");
    let flag7 = run(None, &["--seed", "7"], "c");
    let both = run(Some("3"), &["--seed", "7"], "d");
    assert_ne!(default, env7);
    assert_eq!(env7, flag7);
    assert_eq!(both, flag7);
}

#[test]
fn usage_errors_exit_nonzero() {
    let o = equinorm(&["measure", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = equinorm(&["gen", "--spectrum", "lowpass:0.9", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bandwidth"));
    let o = equinorm(&["gen", "--dims", "1,2,3", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_name_the_input() {
    let o = equinorm(&["measure", "--maps", "/nonexistent/maps", "--out", "/tmp/never.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/maps"));
    let o = equinorm(&["measure", "--layers", "GroupNorm", "--out", "/tmp/never.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn spectrum_rejects_non_shift_equivariant_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let o = equinorm(&[
        "spectrum",
        "--layers",
        "layernorm-chw",
        "--synthetic",
        "1,2,4,4",
        "--n-maps",
        "1",
        "--out",
        &path(tmp.path(), "p.csv"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not shift-equivariant"));
}

#[test]
fn spectrum_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(tmp.path(), "p.csv");
    let o = equinorm(&[
        "spectrum",
        "--layers",
        "identity,LayerNorm-C",
        "--synthetic",
        "2,4,8,8",
        "--n-maps",
        "2",
        "--bins",
        "16",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,r_lo,r_hi,power,count"));
    assert_eq!(lines.count(), 32);
}

#[test]
fn sweep_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(tmp.path(), "s.csv");
    let ok = equinorm(&["sweep", "--dims", "2,2,4,4", "--maps-per-config", "1", "--seed", "3", "--out", &out]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4353);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));

    // a threshold below the round-off floor misreads equivariant rows
    let bad = equinorm(&[
        "sweep",
        "--dims",
        "2,2,4,4",
        "--maps-per-config",
        "1",
        "--t-lo",
        "0",
        "--t-hi",
        "1e-300",
        "--out",
        &out,
    ]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(fs::read_to_string(&out).unwrap().contains(",false"));

    let inverted = equinorm(&["sweep", "--t-lo", "1e-3", "--t-hi", "1e-6", "--out", &out]);
    assert_eq!(inverted.status.code(), Some(1));
}

#[test]
fn measure_reads_npy_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("maps");
    fs::create_dir(&dir).unwrap();
    let values: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    let mut header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3, 4, 4), }".to_string();
    while !(10 + header.len() + 1).is_multiple_of(64) {
        header.push(' ');
    }
    header.push('\n');
    let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
    bytes.extend((header.len() as u16).to_le_bytes());
    bytes.extend(header.as_bytes());
    bytes.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    fs::write(dir.join("x.npy"), bytes).unwrap();

    let out = path(tmp.path(), "r.csv");
    let o = equinorm(&[
        "measure",
        "--layers",
        "instancenorm",
        "--groups",
        "shift",
        "--maps",
        &dir.to_string_lossy(),
        "--trials",
        "8",
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_report(&out).unwrap().cells.len(), 1);
}
