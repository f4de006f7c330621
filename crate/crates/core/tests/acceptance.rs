//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use esppct::attention::{attention_stack_forward, knn_neighbors, vector_attention_forward};
use esppct::config::PipelineConfig;
use esppct::cost::{baseline_config, count_flops, dense_attention_flops, reduction_ratio, InputShape};
use esppct::focus::top_k_points;
use esppct::ngsa::{select_region, NgsaScores};
use esppct::numerics::checkpoint;
use esppct::pipeline::{evaluate, train, EspPct, TrainedModel};
use esppct::pointcloud::{
    centroid_oracle_accuracy, occlude_dataset, parse_sequence, render_sequence, split_dataset, synth_generate,
    Frame, LabeledDataset, OcclusionModel, SynthConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;
const EQUIVARIANCE_TOL: f64 = 1e-9;
const DENSE_RATIO: (u64, u64) = (9, 100);
const MIN_REDUCTION: f64 = 0.70;
const MIN_TOP1: f64 = 0.90;
const MIN_PURITY: f64 = 0.90;
const MAX_EPOCHS: usize = 100;
const OCCLUSION_SEEDS: [u64; 3] = [11, 12, 13];

type Outcome = Result<(bool, String), String>;

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, id: &str, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = took <= limit;
        let pass = ok && in_time;
        if !pass {
            self.failed += 1;
        }
        let timing = if in_time {
            format!("{:.1}s", took.as_secs_f64())
        } else {
            format!("{:.1}s over the {}s limit", took.as_secs_f64(), limit.as_secs())
        };
        println!(
            "{} [{id}] {name}: {detail} ({timing})",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=n);
        let depth = rng.gen_range(1..=3);
        let frame = random_frame(n, &mut rng);
        let layer = random_layer(5, d, depth, &mut rng);
        let nbrs = knn_neighbors(&frame, k).map_err(err)?;
        let out = vector_attention_forward(&layer, &frame, &nbrs).map_err(err)?;
        let (y, a) = dense_attention(&layer, &frame, &nbrs);
        for i in 0..n {
            for c in 0..d {
                worst = worst.max((out.features.get(i, c) - y[i][c]).abs());
                for r in 0..nbrs.k() {
                    worst = worst.max((out.weight(i, r)[c] - a[i][r][c]).abs());
                }
            }
        }
    }
    Ok((worst < ORACLE_TOL, format!("max abs diff {worst:.2e} < {ORACLE_TOL:e} over 50 instances")))
}

fn gradient_suite(dir: &Path) -> Outcome {
    let cfg = dir.join("gradcheck.json");
    fs::write(&cfg, PipelineConfig::default().to_json()).map_err(err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_espctl"))
        .args(["gradcheck", "--config", cfg.to_str().unwrap(), "--seed", "0"])
        .output()
        .map_err(err)?;
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(err)?;
    let runs = summary["runs"].as_array().ok_or("no runs")?;
    let mut checked = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    for r in runs {
        checked += r["report"]["checked"].as_u64().unwrap_or(0);
        skipped += r["report"]["skipped"].as_u64().unwrap_or(0);
        worst = worst.max(r["report"]["max_rel_err"].as_f64().unwrap_or(f64::INFINITY));
    }
    Ok((
        out.status.success() && runs.len() == 4,
        format!(
            "exit {:?}, {} runs, {checked} coordinates checked, {skipped} skipped at kinks, max rel err {worst:.2e}",
            out.status.code(),
            runs.len()
        ),
    ))
}

fn selection_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut bad_topk = 0;
    let mut bad_argmax = 0;
    let mut tied = 0;
    for case in 0..1000 {
        let n = rng.gen_range(1..64);
        let v = if case % 2 == 0 {
            tied_scores(n, &mut rng)
        } else {
            (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()
        };
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied += 1;
        }
        let k = rng.gen_range(0..=n + 2);
        if top_k_points(&v, k) != top_k_oracle(&v, k) {
            bad_topk += 1;
        }
        let s = NgsaScores {
            sum_scores: v.clone(),
            global_scores: v.clone(),
            w: vec![],
        };
        if select_region(&s).map_err(err)? != argmax_oracle(&v) {
            bad_argmax += 1;
        }
    }
    Ok((
        bad_topk == 0 && bad_argmax == 0 && tied > 0,
        format!("top-K mismatches {bad_topk}/1000, argmax mismatches {bad_argmax}/1000, {tied} vectors with ties"),
    ))
}

fn normalization_and_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_sum: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    let mut permuted_frames = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..40);
        let frame = random_frame(n, &mut rng);
        let layer = random_layer(5, 8, 2, &mut rng);
        let k = rng.gen_range(1..12);
        let out = attention_stack_forward(std::slice::from_ref(&layer), &frame, k).map_err(err)?;
        let kk = out.neighbors.k();
        for i in 0..n {
            for c in 0..8 {
                let s: f64 = (0..kk).map(|r| out.weight(i, r)[c]).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
        if !distances_distinct(&frame) {
            continue;
        }
        permuted_frames += 1;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let moved = Frame::new(0, perm.iter().map(|&i| frame.points[i]).collect());
        let b = attention_stack_forward(std::slice::from_ref(&layer), &moved, k).map_err(err)?;
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..8 {
                worst_perm = worst_perm.max((out.features.get(old, c) - b.features.get(new, c)).abs());
            }
            worst_perm = worst_perm.max((out.point_scores[old] - b.point_scores[new]).abs());
        }
    }
    Ok((
        worst_sum < NORMALIZATION_TOL && worst_perm < EQUIVARIANCE_TOL && permuted_frames > 50,
        format!(
            "max |Σa − 1| {worst_sum:.2e}, max permutation diff {worst_perm:.2e} on {permuted_frames} frames (tol {NORMALIZATION_TOL:e})"
        ),
    ))
}

fn dense_ratio() -> Outcome {
    let d = PipelineConfig::default().attention.d_attention as u64;
    let k = dense_attention_flops(30, d).quadratic;
    let n = dense_attention_flops(100, d).quadratic;
    let exact = k * DENSE_RATIO.1 == n * DENSE_RATIO.0;
    Ok((exact, format!("quadratic term {k} / {n} = {}", k as f64 / n as f64)))
}

fn end_to_end_reduction() -> Outcome {
    let cfg = PipelineConfig::default();
    let shape = InputShape::new(cfg.synth.frames_per_sequence as u64, cfg.synth.points_per_frame as u64);
    let full = count_flops(&baseline_config(&cfg), shape).map_err(err)?;
    let pruned = count_flops(&cfg, shape).map_err(err)?;
    let r = reduction_ratio(&full, &pruned).map_err(err)?;
    Ok((
        r.total >= MIN_REDUCTION,
        format!(
            "reduction {:.4} (need >= {MIN_REDUCTION}); head {:.4}, attention {:.4}; {} of {} baseline FLOPs are attention",
            r.total, r.head, r.attention, full.attention, full.total
        ),
    ))
}

struct Desk {
    model: TrainedModel,
    test: LabeledDataset,
}

fn desk_recognition(slot: &mut Option<Desk>) -> Outcome {
    let cfg = PipelineConfig::desk();
    if cfg.training.epochs > MAX_EPOCHS {
        return Err(format!("desk config allows {} epochs", cfg.training.epochs));
    }
    let ds = synth_generate(&cfg.synth).map_err(err)?;
    let oracle = centroid_oracle_accuracy(&ds).map_err(err)?;
    if oracle < 0.95 {
        return Ok((false, format!("generator not separable: centroid oracle {oracle:.3}")));
    }
    let t = &cfg.training;
    let [tr, va, te] = split_dataset(&ds, t.train_fraction, t.val_fraction, t.seed).map_err(err)?;
    let (model, _) = train(&cfg, &tr, &va).map_err(err)?;
    let m = evaluate(&model, &te).map_err(err)?;
    let top1 = m.top1_accuracy.unwrap_or(0.0);
    let purity = m.region_purity.unwrap_or(0.0);
    let detail = format!(
        "oracle {oracle:.3}, {} epochs run, test top-1 {top1:.3} (need {MIN_TOP1}), region purity {purity:.3} (need {MIN_PURITY}) on {} sequences",
        model.stopped_epoch,
        te.len()
    );
    *slot = Some(Desk { model, test: te });
    Ok((top1 >= MIN_TOP1 && purity >= MIN_PURITY, detail))
}

fn occlusion_trend(desk: Option<&Desk>) -> Outcome {
    let desk = desk.ok_or("no model from criterion 6")?;
    let mut means = Vec::new();
    for preset in OcclusionModel::ladder() {
        let mut acc = 0.0;
        for &seed in &OCCLUSION_SEEDS {
            let ds = occlude_dataset(&desk.test, &preset, seed).map_err(err)?;
            acc += evaluate(&desk.model, &ds).map_err(err)?.top1_accuracy.unwrap_or(0.0);
        }
        means.push((preset.name.as_str(), acc / OCCLUSION_SEEDS.len() as f64));
    }
    let ok = means.windows(2).all(|w| w[1].1 <= w[0].1);
    let list: Vec<String> = means.iter().map(|(n, a)| format!("{n} {a:.3}")).collect();
    Ok((ok, format!("mean top-1 {}", list.join(", "))))
}

fn ablation_table(dir: &Path) -> Outcome {
    let mut cfg = PipelineConfig::desk();
    cfg.synth = SynthConfig {
        sequences_per_class: 6,
        frames_per_sequence: 6,
        ..cfg.synth
    };
    cfg.training.epochs = 3;
    cfg.training.patience = 3;
    let cfg_path = dir.join("ablate.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(err)?;
    let data = dir.join("ablate-data");
    let grid = dir.join("grid.csv");
    fs::write(&grid, format!("k,eta\n{},{}\n", cfg.focus.top_k, cfg.focus.eta)).map_err(err)?;
    let (abl, prof) = (dir.join("ablate.csv"), dir.join("profile.csv"));
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let runs: [Vec<String>; 3] = [
        vec!["gen-data".into(), "--config".into(), s(&cfg_path), "--seed".into(), "5".into(), "--out".into(), s(&data)],
        vec!["ablate".into(), "--config".into(), s(&cfg_path), "--data".into(), s(&data), "--out".into(), s(&abl)],
        vec![
            "profile".into(),
            "--config".into(),
            s(&cfg_path),
            "--data".into(),
            s(&data),
            "--grid".into(),
            s(&grid),
            "--out".into(),
            s(&prof),
        ],
    ];
    for args in runs {
        let out = Command::new(env!("CARGO_BIN_EXE_espctl")).args(&args).output().map_err(err)?;
        if !out.status.success() {
            return Err(format!("espctl {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    let read = |p: &Path| -> Result<Vec<csv::StringRecord>, String> {
        csv::Reader::from_path(p)
            .map_err(err)?
            .records()
            .collect::<Result<_, _>>()
            .map_err(err)
    };
    let rows = read(&abl)?;
    let profile_rows = read(&prof)?;
    let flops = |r: &csv::StringRecord| r[5].parse::<u64>().unwrap_or(0);
    let by_name = |name: &str| rows.iter().find(|r| &r[0] == name);
    let no_top_k = by_name("no_top_k").ok_or("no no_top_k row")?;
    let full = rows.last().ok_or("empty table")?;
    let consistent = profile_rows.len() == 1 && profile_rows[0] == *full;
    let shared_cost = rows
        .iter()
        .filter(|r| &r[0] != "no_top_k")
        .all(|r| r[10] == full[10] && r[1] == full[1]);
    let filled = rows.iter().all(|r| !r[3].is_empty() && !r[14].is_empty());
    Ok((
        rows.len() == 5 && flops(no_top_k) > flops(full) && consistent && shared_cost && filled,
        format!(
            "{} rows, FLOPs no_top_k {} vs full {}, full row {} the profile row",
            rows.len(),
            flops(no_top_k),
            flops(full),
            if consistent { "equals" } else { "differs from" }
        ),
    ))
}

fn serialization(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let model = EspPct::new(PipelineConfig::default(), 9).map_err(err)?;
    let path = dir.join("roundtrip.ckpt");
    model.save(&path, None).map_err(err)?;
    let (back, _) = EspPct::load(&path).map_err(err)?;
    let params_ok = back.store().bit_identical(model.store());
    let bytes = checkpoint::encode(model.store(), None).map_err(err)?;
    let (store, _) = checkpoint::decode(&bytes).map_err(err)?;
    let params_ok = params_ok && store.bit_identical(model.store());
    let mut seq_ok = 0;
    for _ in 0..100 {
        let frames = rng.gen_range(1..8);
        let mut seq = random_sequence(frames, 20, &mut rng);
        // push values toward awkward decimal expansions
        for f in &mut seq.frames {
            for p in &mut f.points {
                p.x *= 1e-7 * rng.gen_range(1.0..1e9);
                p.velocity = f64::from_bits(p.velocity.to_bits() ^ 1);
            }
        }
        let text = render_sequence(&seq).map_err(err)?;
        if parse_sequence(&text).map_err(err)?.bit_eq(&seq) {
            seq_ok += 1;
        }
    }
    Ok((
        params_ok && seq_ok == 100,
        format!(
            "{} parameters bit-exact: {params_ok}; sequence round trips {seq_ok}/100",
            model.param_count()
        ),
    ))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let mut report = Report { failed: 0 };
    report.run("1", "attention matches dense reference", secs(10), oracle_equivalence);
    report.run("2", "finite-difference gradient suite", secs(120), || gradient_suite(d));
    report.run("3", "top-K and argmax oracles", secs(5), selection_oracles);
    report.run("4", "normalization and permutation equivariance", secs(10), normalization_and_equivariance);
    report.run("5a", "dense attention ratio at K=30, N=100", secs(1), dense_ratio);
    report.run("5b", "end-to-end FLOP reduction vs unpruned baseline", secs(1), end_to_end_reduction);
    let mut desk = None;
    report.run("6", "desk-scale recognition and region purity", secs(600), || {
        desk_recognition(&mut desk)
    });
    report.run("7", "occlusion degradation trend", secs(1800), || occlusion_trend(desk.as_ref()));
    report.run("8", "ablation table shape", secs(900), || ablation_table(d));
    report.run("9", "checkpoint and sequence serialization", secs(10), || serialization(d));
    println!("{} criteria failed", report.failed);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
