use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use warpdepth::io::read_image;
use warpdepth::synthetic::mover_scene;
use warpdepth::ImageGrid;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_warpdepth"));
    for var in [
        "CONFIG",
        "SEED",
        "VARIANT",
        "SCALES",
        "MOTION",
        "ITERATIONS",
        "OUT",
        "THREADS",
    ] {
        cmd.env_remove(format!("WARPDEPTH_{var}"));
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    ok(bin().args(["synth", "--out"]).arg(&out).args(extra));
    out
}

/// Data rows of a loss CSV, after checking the version line and header.
fn loss_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# warpdepth loss log v1"));
    assert_eq!(
        lines.next(),
        Some(
            "iteration,total,photometric_inverse,photometric_forward,smooth,sparse,\
             grad_norm_depth,grad_norm_pose,grad_norm_motion"
        )
    );
    lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

const STATIC_PLANE: &str = r#"
layout = [{ depth = 5.0, texture = { kind = "noise", seed = 1, feature = 0.5 } }]
camera_path = [
  { rotation = [0.0, 0.0, 0.0], translation = [0.0, 0.0, 0.0] },
  { rotation = [0.0, 0.0, 0.0], translation = [0.0, 0.0, 0.0] },
  { rotation = [0.0, 0.0, 0.0], translation = [0.0, 0.0, 0.0] },
]
"#;

#[test]
fn static_plane_gives_identical_frames() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "scene.toml", STATIC_PLANE);
    let cfg = write(
        tmp.path(),
        "run.toml",
        "scene = \"scene.toml\"\nheight = 16\nwidth = 24\n",
    );
    let b = synth(tmp.path(), "b", &["--config", cfg.to_str().unwrap()]);
    let frames: Vec<Vec<u8>> = ["prev.png", "target.png", "next.png"]
        .iter()
        .map(|f| fs::read(b.join(f)).unwrap())
        .collect();
    assert_eq!(frames[0], frames[1]);
    assert_eq!(frames[1], frames[2]);
    let depth = read_image(b.join("depth.pfm")).unwrap();
    assert!(depth.data().iter().all(|&d| d == 5.0));
}

#[test]
fn mover_motion_is_confined_to_the_mover() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "scene.toml", &mover_scene(0, 0.12).to_toml());
    let cfg = write(
        tmp.path(),
        "run.toml",
        "scene = \"scene.toml\"\nheight = 32\nwidth = 48\n",
    );
    let b = synth(tmp.path(), "b", &["--config", cfg.to_str().unwrap()]);
    let mask = read_image(b.join("mover_mask.pfm")).unwrap();
    assert!(mask.data().contains(&1.0));
    for name in ["motion_prev.pfm", "motion_next.pfm"] {
        let m = read_image(b.join(name)).unwrap();
        assert_eq!(m.channels(), 3);
        for i in 0..m.height() {
            for j in 0..m.width() {
                let moving = m.pixel(i, j).iter().any(|&v| v != 0.0);
                assert_eq!(moving, mask.get(i, j, 0) == 1.0, "{name} at ({i}, {j})");
            }
        }
    }
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a", &["--seed", "7"]);
    let b = synth(tmp.path(), "b", &["--seed", "7"]);
    let c = synth(tmp.path(), "c", &["--seed", "8"]);
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 10);
    for n in &names {
        assert_eq!(
            fs::read(a.join(n)).unwrap(),
            fs::read(b.join(n)).unwrap(),
            "{n:?}"
        );
    }
    assert_ne!(
        fs::read(a.join("target.png")).unwrap(),
        fs::read(c.join("target.png")).unwrap()
    );
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("config_hash = "));
    assert!(manifest.contains("\"target.png\" = "));
}

#[test]
fn zero_iterations_exports_initial_depth() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let o = tmp.path().join("o");
    ok(bin()
        .args(["optimize", "--iterations", "0", "--bundle"])
        .arg(&b)
        .arg("--out")
        .arg(&o));
    let rows = loss_rows(&o.join("loss.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], 0.0);
    let depth = read_image(o.join("depth.pfm")).unwrap();
    let first = depth.data()[0];
    assert!(depth.data().iter().all(|&d| d == first));
    for f in ["depth.png", "checkpoint.bin", "poses.toml", "manifest.toml"] {
        assert!(o.join(f).exists(), "{f}");
    }
}

#[test]
fn loss_log_has_one_row_per_state() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let runs: Vec<PathBuf> = ["on", "off"]
        .iter()
        .map(|m| {
            let o = tmp.path().join(format!("motion-{m}"));
            ok(bin()
                .args(["optimize", "--iterations", "3", "--motion", m, "--bundle"])
                .arg(&b)
                .arg("--out")
                .arg(&o));
            o
        })
        .collect();
    for o in &runs {
        let rows = loss_rows(&o.join("loss.csv"));
        assert_eq!(rows.len(), 4);
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r[0], k as f64);
            let parts: f64 = r[2..6].iter().sum();
            assert!((parts - r[1]).abs() <= 1e-12 * r[1].abs().max(1.0));
            assert!(r[6] > 0.0 && r[7] > 0.0);
        }
    }
    let motion_norm = |o: &Path| loss_rows(&o.join("loss.csv"))[0][8];
    assert!(motion_norm(&runs[0]) > 0.0);
    assert_eq!(motion_norm(&runs[1]), 0.0);
    let on = fs::read_to_string(runs[0].join("manifest.toml")).unwrap();
    let off = fs::read_to_string(runs[1].join("manifest.toml")).unwrap();
    assert!(on.contains("motion = true") && off.contains("motion = false"));
}

#[test]
fn optimization_reduces_loss_tenfold() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let cfg = write(
        tmp.path(),
        "run.toml",
        "iterations = 2000\nforward_terms = false\n[optimizer]\nlearning_rate = 0.01\n",
    );
    let o = tmp.path().join("o");
    ok(bin()
        .arg("optimize")
        .arg("--config")
        .arg(&cfg)
        .arg("--bundle")
        .arg(&b)
        .arg("--out")
        .arg(&o));
    let rows = loss_rows(&o.join("loss.csv"));
    assert_eq!(rows.len(), 2001);
    let (first, last) = (rows[0][1], rows[2000][1]);
    assert!(last * 10.0 < first, "loss {first} -> {last}");
}

#[test]
fn divergence_exits_with_numeric_failure() {
    let tmp = TempDir::new().unwrap();
    let b = synth(
        tmp.path(),
        "b",
        &[
            "--config",
            write(tmp.path(), "s.toml", "height = 16\nwidth = 24\n")
                .to_str()
                .unwrap(),
        ],
    );
    let cfg = write(
        tmp.path(),
        "run.toml",
        "iterations = 5\n[optimizer]\nlearning_rate = 1e200\n",
    );
    let out = run(bin()
        .arg("optimize")
        .arg("--config")
        .arg(&cfg)
        .arg("--bundle")
        .arg(&b)
        .arg("--out")
        .arg(tmp.path().join("o")));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration 1"));
}

fn eval(pred: &Path, truth: &Path, out: &Path) -> String {
    ok(bin()
        .args(["eval", "--pred"])
        .arg(pred)
        .arg("--truth")
        .arg(truth)
        .arg("--out")
        .arg(out));
    fs::read_to_string(out.join("metrics.csv")).unwrap()
}

fn save_pfm(img: &ImageGrid, path: &Path) {
    warpdepth::io::write_image(img, path).unwrap();
}

fn metrics_row(csv: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("AbsRel,SqRel,RMSE,RMSELog,δ<1.25,δ<1.25²,δ<1.25³")
    );
    lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect()
}

#[test]
fn eval_perfect_and_scale_invariant() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let truth = b.join("depth.pfm");
    let perfect = metrics_row(&eval(&truth, &truth, &tmp.path().join("e1")));
    assert_eq!(perfect, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let doubled = tmp.path().join("double.pfm");
    save_pfm(&read_image(&truth).unwrap().scaled(2.0), &doubled);
    assert_eq!(
        metrics_row(&eval(&doubled, &truth, &tmp.path().join("e2"))),
        perfect
    );
    assert!(tmp.path().join("e1/error.png").exists());
}

#[test]
fn eval_matches_direct_formulas_and_reproduces() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let o = tmp.path().join("o");
    ok(bin()
        .args(["optimize", "--iterations", "20", "--bundle"])
        .arg(&b)
        .arg("--out")
        .arg(&o));
    let (pred_path, truth_path) = (o.join("depth.pfm"), b.join("depth.pfm"));
    let csv = eval(&pred_path, &truth_path, &tmp.path().join("e"));
    assert_eq!(
        csv,
        eval(&pred_path, &truth_path, &tmp.path().join("e-again"))
    );

    let pred = read_image(&pred_path).unwrap();
    let gt = read_image(&truth_path).unwrap();
    let med = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let s = med(gt.data()) / med(pred.data());
    let n = gt.data().len() as f64;
    let (mut sums, mut d) = ([0.0f64; 4], [0.0f64; 3]);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let p = (p * s).clamp(1e-3, 80.0);
        let g = g.clamp(1e-3, 80.0);
        sums[0] += (p - g).abs() / g;
        sums[1] += (p - g).powi(2) / g;
        sums[2] += (p - g).powi(2);
        sums[3] += (p.ln() - g.ln()).powi(2);
        let r = (p / g).max(g / p);
        for (k, t) in [1.25f64, 1.5625, 1.953125].iter().enumerate() {
            d[k] += (r < *t) as u8 as f64;
        }
    }
    let expect = [
        sums[0] / n,
        sums[1] / n,
        (sums[2] / n).sqrt(),
        (sums[3] / n).sqrt(),
        d[0] / n,
        d[1] / n,
        d[2] / n,
    ];
    for (got, want) in metrics_row(&csv).iter().zip(expect) {
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "{got} vs {want}"
        );
    }
}

fn warp(
    tmp: &Path,
    name: &str,
    bundle: &Path,
    pose: &str,
    direction: &str,
) -> (ImageGrid, ImageGrid) {
    let out = tmp.join(name);
    ok(bin()
        .arg("warp")
        .arg("--image")
        .arg(bundle.join("target.png"))
        .arg("--depth")
        .arg(bundle.join("depth.pfm"))
        .arg(format!("--pose={pose}"))
        .args(["--direction", direction, "--out"])
        .arg(&out));
    (
        read_image(out.join("warped.png")).unwrap(),
        read_image(out.join("mask.pfm")).unwrap(),
    )
}

#[test]
fn identity_inverse_warp_copies_input() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let (img, mask) = warp(tmp.path(), "w", &b, "0,0,0,0,0,0", "inverse");
    assert_eq!(img, read_image(b.join("target.png")).unwrap());
    assert!(mask.data().iter().all(|&m| m == 1.0));
}

#[test]
fn identity_forward_warp_is_a_gaussian_blur() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let (img, mask) = warp(tmp.path(), "w", &b, "0,0,0,0,0,0", "forward");
    let src = read_image(b.join("target.png")).unwrap();
    let (h, w, ch) = src.dims();
    assert!(mask.data().iter().all(|&m| m == 1.0));
    for i in 0..h {
        for j in 0..w {
            for c in 0..ch {
                let (mut num, mut den) = (0.0, 0.0);
                for a in i.saturating_sub(1)..(i + 2).min(h) {
                    for bb in j.saturating_sub(1)..(j + 2).min(w) {
                        let (dv, du) = (a as f64 - i as f64, bb as f64 - j as f64);
                        let wgt = (-(dv * dv + du * du) / 2.0).exp();
                        num += wgt * src.get(a, bb, c);
                        den += wgt;
                    }
                }
                let expect = (num / den * 255.0).round() / 255.0;
                assert!((img.get(i, j, c) - expect).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
    }
}

#[test]
fn large_translation_masks_the_leading_border() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let (_, mask) = warp(tmp.path(), "w", &b, "0,0,0,0.5,0,0", "inverse");
    let w = mask.width();
    for i in 0..mask.height() {
        assert_eq!(mask.get(i, 0, 0), 1.0);
        assert_eq!(mask.get(i, w - 1, 0), 0.0);
    }
    let valid_cols = (0..w).filter(|&j| mask.get(0, j, 0) == 1.0).count();
    assert!(valid_cols < w - 3);
}

#[test]
fn precedence_flag_env_file() {
    let tmp = TempDir::new().unwrap();
    let b = synth(tmp.path(), "b", &[]);
    let cfg = write(tmp.path(), "run.toml", "iterations = 2\n");
    let rows = |o: &Path| loss_rows(&o.join("loss.csv")).len();
    let base = || {
        let mut c = bin();
        c.arg("optimize")
            .arg("--config")
            .arg(&cfg)
            .arg("--bundle")
            .arg(&b);
        c
    };
    let o1 = tmp.path().join("o1");
    ok(base().arg("--out").arg(&o1));
    assert_eq!(rows(&o1), 3);
    let o2 = tmp.path().join("o2");
    ok(base()
        .env("WARPDEPTH_ITERATIONS", "1")
        .arg("--out")
        .arg(&o2));
    assert_eq!(rows(&o2), 2);
    let o3 = tmp.path().join("o3");
    ok(base()
        .env("WARPDEPTH_ITERATIONS", "1")
        .args(["--iterations", "0"])
        .arg("--out")
        .arg(&o3));
    assert_eq!(rows(&o3), 1);
    let o4 = tmp.path().join("o4");
    ok(base().env("WARPDEPTH_OUT", &o4).args(["--iterations", "0"]));
    assert_eq!(rows(&o4), 1);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let code = |cmd: &mut Command| run(cmd).status.code();
    assert_eq!(code(bin().arg("frobnicate")), Some(1));
    assert_eq!(code(bin().args(["synth", "--variant", "median"])), Some(1));
    assert_eq!(code(bin().arg("--help")), Some(0));
    assert_eq!(
        code(
            bin()
                .args(["optimize", "--bundle"])
                .arg(tmp.path().join("missing"))
                .arg("--out")
                .arg(tmp.path().join("o"))
        ),
        Some(3)
    );
    let bad_cfg = write(tmp.path(), "bad.toml", "scales = 0\n");
    assert_eq!(
        code(bin().arg("synth").arg("--config").arg(&bad_cfg)),
        Some(1)
    );

    let b = synth(tmp.path(), "b", &[]);
    let small = tmp.path().join("small.pfm");
    save_pfm(&ImageGrid::filled(4, 4, 1, 1.0), &small);
    assert_eq!(
        code(
            bin()
                .args(["eval", "--pred"])
                .arg(&small)
                .arg("--truth")
                .arg(b.join("depth.pfm"))
                .arg("--out")
                .arg(tmp.path().join("e"))
        ),
        Some(1)
    );

    fs::write(b.join(".warpdepth.lock"), "").unwrap();
    assert_eq!(code(bin().arg("synth").arg("--out").arg(&b)), Some(3));
}
