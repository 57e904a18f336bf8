//! Acceptance suite: criteria 1-10 at their stated tolerances, one PASS/FAIL
//! line each and a summary. The process exits 0 either way; read the
//! verdicts. The benchmark criteria train every regime on the default
//! configuration for seeds 1, 2 and 3, which takes a good part of half an
//! hour on one core.

use std::fs;
use std::path::Path;
use std::time::Instant;

use mtct_cli::run::{self, CompareOutcome, Stage1Cache, RANKING_LABEL};
use mtct_cli::ExperimentConfig;
use mtct_core::data::Domain;
use mtct_core::gradsuite::{check_names, run_gradsuite, GradSuiteOptions};
use mtct_core::losses::{multitask_softmax_loss, triplet_ranking_loss, tste_loss, LabelBatch, TsteConfig};
use mtct_core::metrics::{evaluate_report, instance_precision_recall, AttributePrediction, MetricsReport, RunMeta};
use mtct_core::model::{MtnModel, ParamGroup, TRUNK_BLOCKS};
use mtct_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn report(v: Verdict, all: &mut Vec<Verdict>) {
    println!("{} [{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.title, v.detail);
    all.push(v);
}

// ---- 1: gradients

fn gradients() -> Verdict {
    let started = Instant::now();
    let rep = run_gradsuite(&GradSuiteOptions::default());
    let secs = started.elapsed().as_secs_f64();
    match rep {
        Ok(r) => {
            let worst = r.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let complete = r.checks.iter().map(|c| c.name.clone()).collect::<Vec<_>>() == check_names();
            let min_points = r.checks.iter().map(|c| c.points).min().unwrap_or(0);
            Verdict {
                id: 1,
                title: "gradient check",
                pass: r.passed() && complete && min_points >= 20 && secs < 120.0,
                detail: format!(
                    "{} checks, {} points each, worst relative error {worst:.2e} < 1e-4, {secs:.1}s < 120s",
                    r.checks.len(),
                    min_points
                ),
            }
        }
        Err(e) => Verdict { id: 1, title: "gradient check", pass: false, detail: e.to_string() },
    }
}

// ---- 2: loss oracles

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

fn constant(tape: &mut Tape, m: &[Vec<f64>]) -> Var {
    tape.constant(Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()).unwrap()
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn loss_oracles() -> Verdict {
    let mut worst = [0.0f64; 3];
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + case);
        // multi-task softmax
        let cards: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(2..6)).collect();
        let batch = rng.random_range(1..7);
        let logits: Vec<Vec<Vec<f64>>> = cards.iter().map(|&c| matrix(&mut rng, batch, c, 4.0)).collect();
        let mut labels: Vec<Vec<Option<usize>>> =
            (0..batch).map(|_| cards.iter().map(|&c| rng.random_bool(0.8).then(|| rng.random_range(0..c))).collect()).collect();
        labels[0][0] = Some(0);
        let mut want = 0.0;
        for (i, row) in labels.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                if let Some(a) = *l {
                    let z = &logits[j][i];
                    want -= (z[a].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
                }
            }
        }
        want /= batch as f64;
        let mut tape = Tape::new();
        let vars: Vec<Var> = logits.iter().map(|m| constant(&mut tape, m)).collect();
        let l = multitask_softmax_loss(&mut tape, &vars, &LabelBatch::new(cards.len(), labels).unwrap()).unwrap();
        worst[0] = worst[0].max((scalar(&tape, l) - want).abs());

        // t-STE and ranking on shared triplets
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..9));
        let alpha = rng.random_range(0.2..5.0);
        let margin = rng.random_range(0.1..2.0);
        let [ft, fp, fneg] = [0, 1, 2].map(|_| matrix(&mut rng, n, d, 1.5));
        let beta = -(1.0 + alpha) / 2.0;
        let (mut tste, mut rank) = (0.0, 0.0);
        for i in 0..n {
            let (dp, dn) = (sqdist(&ft[i], &fp[i]), sqdist(&ft[i], &fneg[i]));
            let (qp, qn) = ((1.0 + dp / alpha).powf(beta), (1.0 + dn / alpha).powf(beta));
            tste -= (qp / (qp + qn)).ln();
            rank += (dp - dn + margin).max(0.0);
        }
        let mut tape = Tape::new();
        let (a, b, c) = (constant(&mut tape, &ft), constant(&mut tape, &fp), constant(&mut tape, &fneg));
        let t = tste_loss(&mut tape, a, b, c, &TsteConfig::new(alpha).unwrap()).unwrap();
        let r = triplet_ranking_loss(&mut tape, a, b, c, margin).unwrap();
        worst[1] = worst[1].max((scalar(&tape, t) - tste / n as f64).abs());
        worst[2] = worst[2].max((scalar(&tape, r) - rank / n as f64).abs());
    }

    // anchors: uniform logits give the sum of ln|Z|, equal distances give ln 2
    let cards = [4usize, 3, 3, 2];
    let mut tape = Tape::new();
    let vars: Vec<Var> = cards.iter().map(|&c| tape.constant(Tensor::zeros(&[3, c])).unwrap()).collect();
    let labels = LabelBatch::new(4, vec![vec![Some(0), Some(1), Some(2), Some(1)]; 3]).unwrap();
    let l = multitask_softmax_loss(&mut tape, &vars, &labels).unwrap();
    let uniform_err = (scalar(&tape, l) - cards.iter().map(|&c| (c as f64).ln()).sum::<f64>()).abs();
    let mut tape = Tape::new();
    let ft = constant(&mut tape, &[vec![0.0, 0.0]]);
    let fp = constant(&mut tape, &[vec![3.0, 4.0]]);
    let fneg = constant(&mut tape, &[vec![-5.0, 0.0]]);
    let t = tste_loss(&mut tape, ft, fp, fneg, &TsteConfig::new(1.0).unwrap()).unwrap();
    let ln2_err = (scalar(&tape, t) - 2f64.ln()).abs();

    Verdict {
        id: 2,
        title: "loss oracles",
        pass: worst.iter().all(|w| *w < 1e-10) && uniform_err < 1e-12 && ln2_err < 1e-12,
        detail: format!(
            "100 cases: softmax {:.1e}, t-STE {:.1e}, ranking {:.1e} (< 1e-10); anchors sum ln|Z| {uniform_err:.1e}, ln 2 {ln2_err:.1e} (< 1e-12)",
            worst[0], worst[1], worst[2]
        ),
    }
}

// ---- 8: metrics fixtures and golden file

fn emit(v: usize) -> AttributePrediction {
    AttributePrediction { value: Some(v), probability: 1.0 }
}

const ABSTAIN: AttributePrediction = AttributePrediction { value: None, probability: 0.0 };

fn metrics_fixtures(golden: &Path) -> Verdict {
    // nine present labels, nine emissions, six correct
    let labels9: Vec<Option<usize>> = vec![Some(0); 9];
    let preds9: Vec<AttributePrediction> = (0..9).map(|i| emit(if i < 6 { 0 } else { 1 })).collect();
    let (p1, r1) = instance_precision_recall(&[preds9], &[labels9]).unwrap();
    // five present labels, three emissions, all correct
    let labels5: Vec<Option<usize>> = vec![Some(1); 5];
    let preds5 = vec![emit(1), emit(1), emit(1), ABSTAIN, ABSTAIN];
    let (p2, r2) = instance_precision_recall(&[preds5], &[labels5]).unwrap();
    let hand = (p1 - 200.0 / 3.0).abs() < 1e-9 && (r1 - 200.0 / 3.0).abs() < 1e-9 && p2 == 100.0 && r2 == 60.0;

    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let preds = vec![vec![emit(0), emit(1), ABSTAIN], vec![emit(2), emit(1), emit(0)], vec![emit(0), ABSTAIN, emit(1)]];
    let labels = vec![vec![Some(0), Some(1), Some(1)], vec![Some(2), Some(0), Some(0)], vec![Some(1), Some(1), Some(1)]];
    let rep = MetricsReport::from_predictions(names, &preds, &labels, 0.5, RunMeta::default()).unwrap();
    let mean = rep.ap_cls.iter().sum::<f64>() / 3.0;
    let column_mean = rep.map_cls == mean;

    let mut cfg = ExperimentConfig::default();
    cfg.apply_file(&golden.join("golden.cfg")).unwrap();
    cfg.data_dir = Some(golden.to_path_buf());
    cfg.checkpoint = Some(golden.join("final.ckpt"));
    let expected = fs::read(golden.join("report.csv")).unwrap();
    let mut identical = true;
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        run::eval(&cfg, dir.path()).unwrap();
        identical &= fs::read(dir.path().join("report.csv")).unwrap() == expected;
    }
    Verdict {
        id: 8,
        title: "metrics fixtures",
        pass: hand && column_mean && identical,
        detail: format!(
            "P=R={p1:.2}; P={p2:.2}/R={r2:.2}; mAP {:.4} == column mean {mean:.4}; golden CSV byte-identical twice: {identical}",
            rep.map_cls
        ),
    }
}

// ---- 9: determinism

const TINY: &str = "
n_source=48
n_target=24
n_pairs=12
image_size=16
heldout_target=12
heldout_pairs=8
trunk_widths=6,8,8,8,8
hidden=12,12
batch_size=8
lr_stage1=0.01
lr_finetune=0.005
epochs_stage1=2
epochs_stage2=3
seeds=1,2
";

fn determinism() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(TINY).unwrap();
    let root = tempfile::tempdir().unwrap();
    let files = |dir: &Path, names: &[&str]| -> Vec<Vec<u8>> { names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect() };
    let mut outputs = Vec::new();
    for rep in 0..2 {
        let base = root.path().join(format!("rep{rep}"));
        let data = base.join("data");
        run::gen_data(&cfg, &data).unwrap();
        let mut c = cfg.clone();
        c.data_dir = Some(data.clone());
        let train_dir = base.join("train");
        fs::create_dir_all(&train_dir).unwrap();
        run::train(&c, &train_dir).unwrap();
        c.checkpoint = Some(train_dir.join("final.ckpt"));
        let eval_dir = base.join("eval");
        fs::create_dir_all(&eval_dir).unwrap();
        run::eval(&c, &eval_dir).unwrap();
        let cmp_dir = base.join("compare");
        fs::create_dir_all(&cmp_dir).unwrap();
        run::compare(&cfg, &cmp_dir, &mut Stage1Cache::new()).unwrap();
        let mut all = files(&data, &[run::TRAIN_INDEX, run::TRAIN_BLOB, run::HELDOUT_INDEX, run::HELDOUT_BLOB, run::MANIFEST]);
        all.extend(files(&train_dir, &["stage1.ckpt", "final.ckpt"]));
        all.extend(files(&eval_dir, &["report.csv", "report.txt"]));
        all.extend(files(&cmp_dir, &["compare.txt", "compare.csv"]));
        outputs.push(all);
    }
    let n = outputs[0].len();
    let same = outputs[0] == outputs[1];
    Verdict {
        id: 9,
        title: "determinism",
        pass: same,
        detail: format!("gen-data, train (MTCT), eval and compare repeated: {n} files bit-identical: {same}"),
    }
}

// ---- benchmark criteria

fn seed_means(c: &CompareOutcome, label: &str) -> f64 {
    c.row(label).map_or(f64::NAN, |r| r.map.0)
}

fn frozen_bits(m: &MtnModel, keep: impl Fn(ParamGroup) -> bool) -> Vec<Vec<u64>> {
    m.params().iter().filter(|p| keep(p.group)).map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn freeze(c: &CompareOutcome) -> Verdict {
    let mut checked = 0;
    let mut ok = true;
    for r in c.runs_of("MTCT") {
        let s1 = &r.stage1.as_ref().expect("MTCT starts from stage 1").model;
        let source = r.outcome.source_stream.as_ref().expect("MTCT keeps its source stream");
        let below5 = |g: ParamGroup| matches!(g, ParamGroup::Trunk { block } if block < TRUNK_BLOCKS);
        let trunk = |g: ParamGroup| !g.is_fc();
        ok &= frozen_bits(&r.outcome.model, below5) == frozen_bits(s1, below5);
        ok &= frozen_bits(source, trunk) == frozen_bits(s1, trunk);
        ok &= r.outcome.checkpoints[0].model == *s1;
        checked += 1;
    }
    Verdict {
        id: 3,
        title: "freeze soundness",
        pass: ok && checked == 3,
        detail: format!("{checked} full MTCT runs: target conv1-conv4 and source trunk bit-identical to Stage-1: {ok}"),
    }
}

fn curriculum(c: &CompareOutcome) -> Verdict {
    let (m, f, n) = (seed_means(c, "MTCT"), seed_means(c, "FTT"), seed_means(c, "NOADPT"));
    Verdict {
        id: 4,
        title: "curriculum benefit",
        pass: m > f && f > n && m - n >= 5.0 && c.elapsed_s < 900.0,
        detail: format!(
            "seed-mean mAP MTCT {m:.2} > FTT {f:.2} > NOADPT {n:.2}; MTCT-NOADPT {:.2} >= 5; compare {:.0}s < 900s",
            m - n,
            c.elapsed_s
        ),
    }
}

fn versus_end2end(c: &CompareOutcome) -> Verdict {
    let (m, e) = (seed_means(c, "MTCT"), seed_means(c, "END2END"));
    Verdict {
        id: 5,
        title: "curriculum vs end-to-end",
        pass: m >= e - 0.5 && m > e,
        detail: format!("seed-mean mAP MTCT {m:.2} vs END2END {e:.2} (need >= {:.2} and strictly greater)", e - 0.5),
    }
}

fn loss_ablation(c: &CompareOutcome) -> Verdict {
    let (m, r) = (seed_means(c, "MTCT"), seed_means(c, RANKING_LABEL));
    Verdict {
        id: 6,
        title: "t-STE vs ranking",
        pass: m >= r - 0.5,
        detail: format!("seed-mean mAP t-STE {m:.2} vs ranking {r:.2} (need >= {:.2})", r - 0.5),
    }
}

fn satisfaction(c: &CompareOutcome) -> Verdict {
    let gains: Vec<String> = c
        .runs_of("MTCT")
        .map(|r| r.satisfaction.map_or("none".to_string(), |(a, b)| format!("{a:.1}->{b:.1}")))
        .collect();
    let mean = c.row("MTCT").and_then(|r| r.satisfaction_gain).unwrap_or(f64::NAN);
    Verdict {
        id: 10,
        title: "triplet satisfaction",
        pass: mean >= 15.0,
        detail: format!("held-out satisfaction per seed [{}], seed-mean gain {mean:+.2} >= 15", gains.join(", ")),
    }
}

fn sparsity(cfg: &ExperimentConfig, cache: &mut Stage1Cache) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let s = run::sweep(cfg, dir.path(), cache).unwrap();
    print!("{}", run::sweep_table(&s));
    let flat = cfg.seeds.iter().all(|&seed| {
        let c = s.seed_curve("NOADPT", seed);
        c.len() == 4 && c.iter().all(|v| v.to_bits() == c[0].to_bits())
    });
    let (dm, df) = (s.drop("MTCT"), s.drop("FTT"));
    Verdict {
        id: 7,
        title: "sparsity robustness",
        pass: s.fractions == [100, 75, 50, 10] && flat && dm < df,
        detail: format!("NOADPT exactly constant per seed: {flat}; seed-mean drop 100%->10% MTCT {dm:.2} < FTT {df:.2}"),
    }
}

/// Seed-mean mAP of every compared model re-evaluated without abstention.
fn zero_threshold_table(cfg: &ExperimentConfig, c: &CompareOutcome) -> String {
    let tests: Vec<_> = cfg
        .seeds
        .iter()
        .map(|&s| (s, run::generate_splits(&cfg.with_seed(s)).unwrap().1.domain_subset(Domain::Target)))
        .collect();
    let mut out = String::from("threshold 0 (no abstention), seed-mean mAP_cls:\n");
    for row in &c.rows {
        let maps: Vec<f64> = c
            .runs_of(&row.label)
            .map(|r| {
                let test = &tests.iter().find(|(s, _)| *s == r.seed).unwrap().1;
                evaluate_report(&r.outcome.model, test, 0.0, RunMeta::default()).unwrap().map_cls
            })
            .collect();
        let (m, sd) = run::mean_std(&maps);
        out.push_str(&format!("  {:<10} {m:6.2} +- {sd:5.2}\n", row.label));
    }
    out
}

fn main() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut all = Vec::new();
    report(gradients(), &mut all);
    report(loss_oracles(), &mut all);
    report(metrics_fixtures(&golden), &mut all);
    report(determinism(), &mut all);

    let cfg = ExperimentConfig::default();
    let mut cache = Stage1Cache::new();
    let dir = tempfile::tempdir().unwrap();
    let compare = run::compare(&cfg, dir.path(), &mut cache).expect("benchmark compare run");
    print!("{}", run::compare_table(&compare.rows));
    print!("{}", zero_threshold_table(&cfg, &compare));
    report(freeze(&compare), &mut all);
    report(curriculum(&compare), &mut all);
    report(versus_end2end(&compare), &mut all);
    report(loss_ablation(&compare), &mut all);
    report(satisfaction(&compare), &mut all);
    report(sparsity(&cfg, &mut cache), &mut all);

    all.sort_by_key(|v| v.id);
    println!("\nacceptance summary");
    for v in &all {
        println!("{} [{}] {}", if v.pass { "PASS" } else { "FAIL" }, v.id, v.title);
    }
    // Verdicts are reported, not turned into a process failure, so the rest
    // of the workspace suites still run after an honest FAIL.
    let failed = all.iter().filter(|v| !v.pass).count();
    if failed > 0 {
        println!("{failed} of {} criteria FAILED", all.len());
    } else {
        println!("all {} criteria passed", all.len());
    }
}
