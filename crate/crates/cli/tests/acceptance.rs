//! End-to-end acceptance suite. Every check prints one PASS/FAIL line, written
//! straight to stderr so it shows even when the harness captures output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use splatmap::bench::{bench_scene, siad_bench, tracking_bench};
use splatmap::frontend::{FactorGraph, GraphConfig};
use splatmap::gradcheck;
use splatmap::grid::{Grid, RgbImage};
use splatmap::losses::{edge_weight_at, ms_ssim, ssim, EdgeWeighting, MS_SSIM_SCALES, SSIM_WINDOW};
use splatmap::synth::{FlowNoise, SyntheticProvider, WeightMode};

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {id} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

fn splatmap(threads: usize, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_splatmap"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn criterion_1_gradient_oracle() {
    let t = Instant::now();
    let checks = gradcheck::all();
    let elapsed = t.elapsed();
    let worst = checks.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    let ok = checks.iter().all(|c| c.passed()) && elapsed < Duration::from_secs(120);
    let detail = format!(
        "{} checks, worst {:.2e} in {}, {:.1}s",
        checks.len(),
        worst.worst,
        worst.name,
        elapsed.as_secs_f64()
    );
    report(1, "gradient oracle", ok, &detail);
    assert!(ok, "{checks:?}");
}

#[test]
fn criterion_2_tracking_exactness() {
    let scene = bench_scene().unwrap();
    let r = tracking_bench(&scene, FlowNoise::default(), 0.01, 0.01, 10, 1).unwrap();
    let ok = r.ate_rmse < 1e-4 && r.cost_non_increasing && r.costs.len() <= 11;
    report(
        2,
        "tracking exactness",
        ok,
        &format!(
            "ATE {:.2e}, {} steps, cost {:.2e} -> {:.2e}",
            r.ate_rmse,
            r.costs.len() - 1,
            r.costs[0],
            r.costs.last().unwrap()
        ),
    );
    assert!(ok, "{r:?}");
}

#[test]
fn criterion_3_confidence_weighting() {
    let scene = bench_scene().unwrap();
    let mut wins = 0;
    for seed in 0..20 {
        let noise = |weights| FlowNoise {
            sigma: 0.5,
            outlier_fraction: 0.1,
            weights,
            seed,
        };
        let oracle = tracking_bench(&scene, noise(WeightMode::Oracle), 0.01, 0.01, 10, seed).unwrap();
        let uniform = tracking_bench(&scene, noise(WeightMode::Uniform), 0.01, 0.01, 10, seed).unwrap();
        wins += usize::from(oracle.ate_rmse < uniform.ate_rmse);
    }
    let ok = wins >= 18;
    report(3, "confidence weighting", ok, &format!("oracle weights better on {wins}/20 seeds"));
    assert!(ok);
}

#[test]
fn criterion_4_siad_lifecycle() {
    let scene = bench_scene().unwrap();
    let r = siad_bench(&scene, 0.1, 3.0, 3, 5).unwrap();
    let ok = r.corrupted_fraction() >= 0.95 && r.clean_fraction() < 0.01 && r.ledger_exact;
    let detail = format!(
        "corrupted pruned {}/{}, clean pruned {}/{}, ledger exact {}",
        r.corrupted_pruned, r.corrupted, r.clean_pruned, r.clean, r.ledger_exact
    );
    report(4, "SIAD lifecycle", ok, &detail);
    assert!(ok, "{r:?}");
}

#[test]
fn criterion_5_ablation_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = splatmap(0, &["ablate", "--seed", "0", "--output", path_str(dir.path())]);
    let elapsed = t.elapsed();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = json(&dir.path().join("ablation.json"));
    let psnr = |v: &str| {
        table["rows"].as_array().unwrap().iter().find(|r| r["variant"] == v).unwrap()["psnr"]
            .as_f64()
            .unwrap()
    };
    let (a, b, c, d, e) = (psnr("A"), psnr("B"), psnr("C"), psnr("D"), psnr("E"));
    let checks = [
        ("E-A>=0.3", e - a >= 0.3),
        ("B>=A", b >= a),
        ("C>=A", c >= a),
        ("D>=max(B,C)-0.05", d >= b.max(c) - 0.05),
        ("runtime<15min", elapsed < Duration::from_secs(15 * 60)),
    ];
    let ok = checks.iter().all(|(_, ok)| *ok);
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let detail = format!(
        "PSNR A {a:.3} B {b:.3} C {c:.3} D {d:.3} E {e:.3}, {:.0}s{}",
        elapsed.as_secs_f64(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {}", failed.join(" "))
        }
    );
    report(5, "ablation ordering", ok, &detail);
    assert!(ok, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn criterion_6_mapping_quality_floor() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("mapping.toml");
    // Every training frame becomes a keyframe; 30 optimizer steps after each.
    std::fs::write(
        &config,
        "seed = 0\n[frontend]\nkeyframe_flow_threshold = 0.0\n[mapping]\nsteps_per_keyframe = 30\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = splatmap(0, &["run", "--config", path_str(&config), "--output", path_str(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&out_dir.join("metrics.json"));
    let views: Vec<f64> = m["views"].as_array().unwrap().iter().map(|v| v["psnr"].as_f64().unwrap()).collect();
    let keyframes = m["keyframes"].as_u64().unwrap();
    let ok = keyframes == 12 && views.len() == 4 && views.iter().all(|&p| p >= 30.0);
    let list: Vec<String> = views.iter().map(|p| format!("{p:.2}")).collect();
    report(
        6,
        "mapping quality floor",
        ok,
        &format!("{keyframes} training views, held-out PSNR [{}] dB", list.join(", ")),
    );
    assert!(ok);
}

/// 2×2 mean pooling written independently of the library.
fn pool(img: &RgbImage) -> RgbImage {
    Grid::from_fn(img.width() / 2, img.height() / 2, |x, y| {
        let mut s = nalgebra::Vector3::zeros();
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            s += img.get(2 * x + dx, 2 * y + dy);
        }
        s / 4.0
    })
}

#[test]
fn criterion_7_exact_values() {
    let mut checks = Vec::new();

    let scene = bench_scene().unwrap();
    let provider = SyntheticProvider::new(&scene, FlowNoise::default());
    let mut g = FactorGraph::new(scene.intrinsics, GraphConfig::default());
    let mut first_evicted = None;
    for n in 0..26 {
        let f = n % scene.len();
        let ins = g.add_keyframe(&scene.frame(f), scene.poses[f], scene.disparity(f), &provider).unwrap();
        first_evicted = first_evicted.or(ins.evicted);
    }
    checks.push(("window 25", g.len() == 25 && first_evicted == Some(0)));

    checks.push(("SSIM window 11", SSIM_WINDOW == 11));
    checks.push(("3 scales", MS_SSIM_SCALES == 3));
    let img = |seed: u64, w: usize, h: usize| {
        Grid::from_fn(w, h, |x, y| {
            let t = (x * 7 + y * 13) as f64 + seed as f64;
            nalgebra::Vector3::new(
                (t * 0.37).sin() * 0.4 + 0.5,
                (t * 0.11).cos() * 0.4 + 0.5,
                ((x * y) as f64 * 0.05).sin() * 0.3 + 0.5,
            )
        })
    };
    let (a, b) = (img(1, 48, 46), img(2, 48, 46));
    let (a1, b1) = (pool(&a), pool(&b));
    let (a2, b2) = (pool(&a1), pool(&b1));
    let by_hand = (ssim(&a, &b).unwrap().value + ssim(&a1, &b1).unwrap().value + ssim(&a2, &b2).unwrap().value) / 3.0;
    checks.push(("pooled pyramid", (ms_ssim(&a, &b).unwrap().value - by_hand).abs() < 1e-12));
    // Three scales of an 11-pixel window need 44 pixels.
    checks.push((
        "minimum size 44",
        ms_ssim(&img(1, 44, 44), &img(2, 44, 44)).is_ok() && ms_ssim(&img(1, 43, 44), &img(2, 43, 44)).is_err(),
    ));

    let sigma = 0.5;
    let w = EdgeWeighting::Smooth { sigma };
    checks.push(("w(1)=1", edge_weight_at(1.0, w) == 1.0));
    let e = (-1.0f64).exp();
    checks.push((
        "w(1+-sigma)=1/e",
        (edge_weight_at(1.0 + sigma, w) - e).abs() < 1e-15 && (edge_weight_at(1.0 - sigma, w) - e).abs() < 1e-15,
    ));

    let ok = checks.iter().all(|(_, ok)| *ok);
    let detail: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "wrong" })).collect();
    report(7, "exact values", ok, &detail.join(", "));
    assert!(ok);
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = [1usize, 4]
        .iter()
        .map(|&threads| {
            let out_dir = dir.path().join(format!("threads{threads}"));
            let out = splatmap(threads, &["run", "--seed", "11", "--output", path_str(&out_dir)]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            out_dir
        })
        .collect();
    // Wall-clock timings are the only output allowed to differ.
    let compared: Vec<PathBuf> = files_under(&runs[0])
        .into_iter()
        .filter(|p| p.file_name().unwrap() != "timings.json")
        .map(|p| p.strip_prefix(&runs[0]).unwrap().to_path_buf())
        .collect();
    let images = compared.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    let differing: Vec<String> = compared
        .iter()
        .filter(|rel| std::fs::read(runs[0].join(rel)).unwrap() != std::fs::read(runs[1].join(rel)).unwrap_or_default())
        .map(|rel| rel.display().to_string())
        .collect();
    let same_listing = files_under(&runs[1]).len() == compared.len() + 1;
    let ok = differing.is_empty() && same_listing && images > 0 && compared.iter().any(|p| p.ends_with("metrics.json"));
    report(
        8,
        "determinism",
        ok,
        &format!(
            "{} files ({images} images) compared across 1 and 4 threads, {} differ",
            compared.len(),
            differing.len()
        ),
    );
    assert!(ok, "{differing:?}");
}
