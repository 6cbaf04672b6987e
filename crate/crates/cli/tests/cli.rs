use std::fs;
use std::path::Path;
use std::process::Command;

use pointtree::data::{generate, ShapeKind, ShapeSpec};
use pointtree::geometry::{apply, rotation_about, AffineTransform};
use pointtree::io::{parse_xyz, to_xyz};
use pointtree::kdtree::partition_from_dump;
use pointtree::PointCloud;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn pointtree(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pointtree"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    Output {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8(out.stdout).expect("utf-8 stdout"),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pointtree(dir, args);
    assert_eq!(out.code, 0, "{args:?} failed: {}", out.stderr);
    out.stdout
}

/// Splits a shell line with single-quote quoting.
fn shell_words(line: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\'' => {
                quoted = !quoted;
                in_word = true;
            }
            '\\' if !quoted => {
                cur.extend(chars.next());
                in_word = true;
            }
            c if c.is_whitespace() && !quoted => {
                if in_word {
                    words.push(std::mem::take(&mut cur));
                    in_word = false;
                }
            }
            c => {
                cur.push(c);
                in_word = true;
            }
        }
    }
    if in_word {
        words.push(cur);
    }
    words
}

/// Re-runs the command printed on the first stdout line.
fn rerun(dir: &Path, stdout: &str) -> String {
    let line = stdout.lines().next().expect("config line");
    let cmd = line.strip_prefix("# config: ").expect("config prefix");
    let words = shell_words(cmd);
    assert_eq!(words[0], "pointtree");
    let args: Vec<&str> = words[1..].iter().map(String::as_str).collect();
    ok(dir, &args)
}

fn write(dir: &Path, name: &str, cloud: &PointCloud) {
    fs::write(dir.join(name), to_xyz(cloud)).unwrap();
}

fn body(stdout: &str) -> &str {
    stdout.split_once('\n').map_or("", |(_, rest)| rest)
}

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

#[test]
fn collinear_axis_dump_matches_golden() {
    let out = ok(fixtures(), &["tree", "collinear4.xyz", "--rule", "axis"]);
    let golden = fs::read_to_string(fixtures().join("collinear4_axis.dump")).unwrap();
    assert_eq!(body(&out), golden);
}

#[test]
fn pca_partition_survives_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = generate(ShapeSpec::new(ShapeKind::TwoCluster, 32, 3).with_noise(0.05)).unwrap();
    let rotated = apply(
        AffineTransform::from_linear(rotation_about([1.0, 2.0, -0.5], 0.9)),
        &cloud,
    )
    .unwrap();
    write(dir.path(), "a.xyz", &cloud);
    write(dir.path(), "b.xyz", &rotated);
    let a = ok(dir.path(), &["tree", "a.xyz", "--rule", "pca"]);
    let b = ok(dir.path(), &["tree", "b.xyz", "--rule", "pca"]);
    assert_eq!(partition_from_dump(&a).unwrap(), partition_from_dump(&b).unwrap());
}

#[test]
fn non_power_of_two_needs_pad() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.xyz",
        &generate(ShapeSpec::new(ShapeKind::RandomUniform, 6, 1)).unwrap(),
    );
    let out = pointtree(dir.path(), &["tree", "c.xyz"]);
    assert_eq!(out.code, 3, "{}", out.stderr);
    assert!(out.stderr.contains("power of two"));
    let padded = ok(dir.path(), &["tree", "c.xyz", "--pad"]);
    assert_eq!(
        partition_from_dump(&padded).unwrap().iter().map(Vec::len).max(),
        Some(8)
    );
}

#[test]
fn planar_cloud_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.xyz"), "0 0 0\n1 0 0\n0 1 0\n1 1 0\n2 3 0\n").unwrap();
    assert_eq!(pointtree(dir.path(), &["prealign", "p.xyz"]).code, 2);
}

#[test]
fn usage_errors_exit_3_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pointtree(dir.path(), &["bogus"]).code, 3);
    assert_eq!(pointtree(dir.path(), &["tree"]).code, 3);
    assert_eq!(pointtree(dir.path(), &["tree", "missing.xyz"]).code, 3);
    assert_eq!(pointtree(dir.path(), &["shape", "--format", "ptc1"]).code, 3);
    assert_eq!(pointtree(dir.path(), &["generate"]).code, 3);
    assert_eq!(pointtree(dir.path(), &["--help"]).code, 0);
}

#[test]
fn ead_of_identical_and_similar_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = generate(ShapeSpec::new(ShapeKind::RandomUniform, 40, 2)).unwrap();
    let sim = AffineTransform::similarity(rotation_about([0.3, -1.0, 0.2], 2.0), 3.5, [1.0, -4.0, 0.5]);
    write(dir.path(), "a.xyz", &cloud);
    write(dir.path(), "s.xyz", &apply(sim, &cloud).unwrap());
    assert_eq!(
        body(&ok(dir.path(), &["ead", "a.xyz", "a.xyz"])),
        "0.000000e0 0.000000e0\n"
    );
    let out = ok(dir.path(), &["ead", "a.xyz", "s.xyz", "--exact"]);
    let value: f64 = body(&out).split_whitespace().next().unwrap().parse().unwrap();
    assert!(value < 1e-9, "{value}");
}

#[test]
fn prealign_cancels_an_affine_map() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = generate(ShapeSpec::new(ShapeKind::RandomUniform, 256, 5)).unwrap();
    let affine = AffineTransform::new([[2.0, 0.7, -0.3], [0.1, 0.5, 0.4], [-1.0, 0.2, 1.3]], [3.0, 1.0, -2.0]);
    write(dir.path(), "a.xyz", &cloud);
    write(dir.path(), "b.xyz", &apply(affine, &cloud).unwrap());
    ok(dir.path(), &["--out", "pa.xyz", "prealign", "a.xyz"]);
    ok(dir.path(), &["--out", "pb.xyz", "prealign", "b.xyz"]);
    let out = ok(dir.path(), &["ead", "pa.xyz", "pb.xyz", "--samples", "20000"]);
    let value: f64 = body(&out).split_whitespace().next().unwrap().parse().unwrap();
    assert!(value < 1e-4, "{value}");
}

#[test]
fn one_iteration_is_prealign_plus_rescale() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = generate(ShapeSpec::new(ShapeKind::RandomUniform, 64, 6)).unwrap();
    let skew = AffineTransform::new([[1.0, 0.8, 0.0], [0.0, 1.0, 0.5], [0.3, 0.0, 2.0]], [0.0; 3]);
    write(dir.path(), "a.xyz", &apply(skew, &cloud).unwrap());
    let once = parse_xyz(&ok(
        dir.path(),
        &["prealign", "a.xyz", "--iterative", "--max-iter", "1"],
    ))
    .unwrap();
    let moved = parse_xyz(&fs::read_to_string(dir.path().join("a.xyz")).unwrap()).unwrap();
    let expect = pointtree::pca::rescale_mean_abs(&pointtree::pca::prealign(&moved).unwrap()).unwrap();
    assert_eq!(once, expect);
}

#[test]
fn iterative_prealign_is_idempotent_once_converged() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "a.xyz",
        &generate(ShapeSpec::new(ShapeKind::RandomUniform, 64, 8)).unwrap(),
    );
    ok(dir.path(), &["--out", "b.xyz", "prealign", "a.xyz", "--iterative"]);
    ok(dir.path(), &["--out", "c.xyz", "prealign", "b.xyz", "--iterative"]);
    let b = fs::read_to_string(dir.path().join("b.xyz")).unwrap();
    assert_eq!(b, fs::read_to_string(dir.path().join("c.xyz")).unwrap());
}

#[test]
fn ptc1_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "--format", "ptc1", "--out", "s.ptc1", "shape", "--kind", "lollipop", "--points", "16",
        ],
    );
    let cloud = pointtree::io::read_cloud(&dir.path().join("s.ptc1")).unwrap();
    assert_eq!(cloud.len(), 16);
    assert!(cloud.labels().is_some());
}

fn manifest_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("manifest.tsv"))
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn transform_multiplies_records_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "src", "generate", "--counts", "6,3,3", "--points", "16"]);
    ok(
        d,
        &[
            "--out",
            "t1",
            "--seed",
            "5",
            "transform",
            "src",
            "--dist",
            "affine",
            "--augment",
            "3",
        ],
    );
    ok(
        d,
        &[
            "--out",
            "t2",
            "--seed",
            "5",
            "transform",
            "src",
            "--dist",
            "affine",
            "--augment",
            "3",
        ],
    );
    let rows = manifest_rows(&d.join("t1/train"));
    assert_eq!(rows[0], ["file", "class_label", "transform_kind", "seed_path"]);
    assert_eq!(rows.len() - 1, 18);
    assert!(rows[1..]
        .iter()
        .all(|r| r[2] == "affine" && r[3].split('/').count() == 3));
    for split in ["train", "val", "test"] {
        for row in &manifest_rows(&d.join("t1").join(split))[1..] {
            let a = fs::read(d.join("t1").join(split).join(&row[0])).unwrap();
            let b = fs::read(d.join("t2").join(split).join(&row[0])).unwrap();
            assert_eq!(a, b);
        }
    }
    ok(
        d,
        &[
            "--out",
            "flat",
            "transform",
            "src/val",
            "--dist",
            "projective",
            "--augment",
            "2",
        ],
    );
    assert_eq!(manifest_rows(&d.join("flat")).len() - 1, 6);
}

#[test]
fn memorizable_set_is_learned_and_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "--out", "data", "generate", "--counts", "8,8,3", "--points", "32", "--seed", "4",
        ],
    );
    let train = |out: &str| {
        ok(
            d,
            &[
                "--out",
                out,
                "train",
                "data",
                "--depth",
                "5",
                "--epochs",
                "30",
                "--batch-size",
                "4",
                "--augment-flip",
                "false",
            ],
        )
    };
    let a = train("a.ptw1");
    let b = train("b.ptw1");
    assert_eq!(body(&a), body(&b));
    assert_eq!(fs::read(d.join("a.ptw1")).unwrap(), fs::read(d.join("b.ptw1")).unwrap());
    let eval = ok(
        d,
        &[
            "eval",
            "data",
            "--split",
            "train",
            "--checkpoint",
            "a.ptw1",
            "--depth",
            "5",
            "--augment-flip",
            "false",
        ],
    );
    let row: Vec<&str> = body(&eval).lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[3], "1.000000", "{eval}");

    let mismatch = pointtree(d, &["eval", "data", "--checkpoint", "a.ptw1", "--depth", "4"]);
    assert_eq!(mismatch.code, 3);
    ok(
        d,
        &[
            "--out",
            "c.ptw1",
            "train",
            "data",
            "--depth",
            "5",
            "--epochs",
            "1",
            "--merge",
            "concat-mlp",
        ],
    );
}

#[test]
fn printed_config_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "my cloud.xyz",
        &generate(ShapeSpec::new(ShapeKind::RandomUniform, 32, 9)).unwrap(),
    );
    for args in [
        &["shape", "--kind", "two-cluster", "--points", "20", "--seed", "3"][..],
        &["tree", "my cloud.xyz"],
        &["ead", "my cloud.xyz", "my cloud.xyz", "--samples", "500"],
        &["prealign", "my cloud.xyz", "--iterative"],
        &[
            "ead-table",
            "--points",
            "64",
            "--transforms",
            "3",
            "--samples",
            "200",
            "--dist",
            "projective",
        ],
    ] {
        let first = ok(d, args);
        assert_eq!(rerun(d, &first), first, "{args:?}");
    }
}
