//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Criteria 4 to 8 pretrain real base models (seeds 1, 2 and 3) and run the
//! short three-task sequence, so this target takes several minutes.

use fvlab::cli::{
    analyze, cmd_find_heads, cmd_run_sequence, full_suite, ExperimentConfig, GradCheckSettings,
};
use fvlab::cltrain::{pretrain, run_sequence, CompetenceReport, Method, SequenceResult, SequenceSetup, TrainingConfig};
use fvlab::eval::{compute_metrics, rouge_l, ScoreMatrix};
use fvlab::fv::{
    causal_effect, extract_fv, fv_similarity, get_function_vector_head_set, layer_sweep, probe_bundles,
    CausalEffectGrid, FunctionVectorHeadSet, InterventionMode, SweepResult,
};
use fvlab::model::{read_checkpoint, write_checkpoint, HeadIndex, Model};
use fvlab::tasks::{SequenceSpec, Suite};
use std::time::Instant;

mod common;

struct Report {
    lines: Vec<(usize, bool)>,
    start: Instant,
}

impl Report {
    fn record(&mut self, n: usize, ok: bool, detail: String) {
        let t = self.start.elapsed().as_secs();
        println!("criterion {n}: {} {detail}  [{t}s]", if ok { "PASS" } else { "FAIL" });
        self.lines.push((n, ok));
    }
}

fn note(s: String) {
    println!("    {s}");
}

/// Base model, competence and head set for one seed under the short preset.
struct Base {
    cfg: ExperimentConfig,
    suite: Suite,
    m0: Model,
    competence: CompetenceReport,
    heads: FunctionVectorHeadSet,
    grid: CausalEffectGrid,
}

fn base(seed: u64) -> fvlab::Result<Base> {
    let mut cfg = ExperimentConfig::short_sequence();
    cfg.seed = seed;
    let suite = Suite::build(&cfg.suite, seed)?;
    let (m0, competence) = pretrain(&cfg.model_config(), &suite, &cfg.pretrain, seed, |_, _| {})?;
    let probe = suite.select(&cfg.suite.probe)?;
    let (heads, grid) = get_function_vector_head_set(&m0, "M0", &suite.vocab, &probe, &cfg.fv)?;
    Ok(Base { cfg, suite, m0, competence, heads, grid })
}

fn sequence(b: &Base, method: Method) -> fvlab::Result<SequenceResult> {
    let train = TrainingConfig { method, ..b.cfg.training.clone() };
    let setup = SequenceSetup { suite: &b.suite, base: &b.m0, head_set: &b.heads, train: &train, fv: &b.cfg.fv, eval: &b.cfg.eval };
    run_sequence(&setup, None)
}

/// Lowest FV self-similarity of any eval task at any stage.
fn min_self_sim(r: &SequenceResult, eval: &[String]) -> fvlab::Result<f64> {
    let mut m = f64::INFINITY;
    for s in &r.snapshots[1..] {
        for e in eval {
            m = m.min(fv_similarity(s.get(e)?, r.snapshots[0].get(e)?)?);
        }
    }
    Ok(m)
}

fn mean_a(s: &ScoreMatrix, ids: &[String], m: usize) -> fvlab::Result<f64> {
    Ok(ids.iter().map(|t| s.a(t, m)).sum::<fvlab::Result<f64>>()? / ids.len() as f64)
}

fn sweep_line(s: &SweepResult) -> String {
    let per: Vec<String> = s.layers.iter().map(|l| format!("{:.1}", l.val)).collect();
    format!("plain {:.1}, layers [{}], best layer {} -> {:.1}", s.plain_val, per.join(", "), s.best_layer, s.best_val)
}

fn criterion_1(r: &mut Report) -> fvlab::Result<()> {
    let s = GradCheckSettings::default();
    let lines = full_suite(&s)?;
    let worst = lines.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    let losses_full = lines.iter().filter(|l| l.name.starts_with("loss/")).all(|l| l.checked >= 64);
    let coords: usize = lines.iter().map(|l| l.checked).sum();
    let ok = failed.is_empty() && losses_full && s.tol <= 1e-4 && s.eps == 1e-5;
    r.record(
        1,
        ok,
        format!("{} cases, {coords} coordinates, max rel err {worst:.2e} (tol {:.0e}){}", lines.len(), s.tol, if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }),
    );
    Ok(())
}

/// Repeated selection of the maximum, ties to the lowest flat index.
fn top_k_oracle(values: &[f64], n_heads: usize, k: usize) -> Vec<HeadIndex> {
    let mut taken = vec![false; values.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..values.len() {
            if !taken[i] && best.is_none_or(|b| values[i] > values[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k within grid");
        taken[b] = true;
        out.push(HeadIndex::new(b / n_heads, b % n_heads));
    }
    out
}

fn criterion_2(r: &mut Report, b: &Base) -> fvlab::Result<()> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in &b.cfg.suite.probe {
        let task = b.suite.get(id)?;
        for bundle in probe_bundles(task, &b.cfg.fv)?.iter().take(5) {
            let own = b.m0.record_last_token_heads(&bundle.shuffled_tokens(&b.suite.vocab))?;
            for (h, act) in &own {
                worst = worst.max(causal_effect(&b.m0, &b.suite.vocab, *h, bundle, act)?.abs());
                checked += 1;
            }
        }
    }
    let k = b.cfg.fv.top_k;
    let oracle = top_k_oracle(&b.grid.values, b.grid.n_heads, k);
    let same = b.heads.heads == oracle;
    let ok = worst <= 1e-12 && checked >= b.m0.config.n_heads_total() && same;
    r.record(2, ok, format!("self-patch max |CE| {worst:.1e} over {checked} head-probe pairs; top-{k} equals oracle: {same}"));

    let mut sorted = b.grid.values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2]);
    let max = sorted[sorted.len() - 1];
    let hs: Vec<String> = b.heads.heads.iter().map(|h| h.to_string()).collect();
    note(format!("head set {}", hs.join(" ")));
    note(format!("CE max {max:.4}, median {median:.2e}, ratio >= 5: {}", max >= 5.0 * median.abs()));
    Ok(())
}

fn criterion_3(r: &mut Report) -> fvlab::Result<()> {
    let ids = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let seq = SequenceSpec::new(ids(&["A", "B"]), ids(&["E"]))?;
    let mut s = ScoreMatrix::new(ids(&["A", "B", "E"]), 3, 5);
    for (t, m, z, n) in [
        ("A", 0, 10.0, 30.0),
        ("A", 1, 90.0, 95.0),
        ("A", 2, 60.0, 70.0),
        ("B", 0, 5.0, 20.0),
        ("B", 1, 10.0, 25.0),
        ("B", 2, 80.0, 85.0),
        ("E", 0, 70.0, 90.0),
        ("E", 1, 50.0, 80.0),
        ("E", 2, 40.0, 75.0),
    ] {
        s.set(t, m, z, n)?;
    }
    let m = compute_metrics(&s, &seq)?;
    // GP = a[E][2], IP = â[E][2], FP = mean(a[A][2], a[B][2]), AP = mean(a[A][1], a[B][2])
    let hand = (m.gp, m.ip, m.fp, m.ap) == (40.0, 75.0, 70.0, 85.0);
    let forget = m.forget == m.ap - m.fp;
    fn w(x: &str) -> Vec<&str> {
        x.split(' ').collect()
    }
    let rouge = rouge_l(&w("the cat"), &w("the cat sat")) == 0.8
        && rouge_l(&w("a b"), &w("a b")) == 1.0
        && rouge_l(&w("a b"), &w("c d")) == 0.0;
    r.record(3, hand && forget && rouge, format!("hand metrics {hand}, Forget = AP - FP {forget}, Rouge-L oracles {rouge}"));
    Ok(())
}

fn criterion_4(r: &mut Report, bases: &[Base]) -> fvlab::Result<()> {
    let mut all = true;
    let mut parts = Vec::new();
    for b in bases {
        let competent = b.competence.competent;
        let weakest = b.competence.tasks.iter().map(|t| t.n_shot).fold(f64::INFINITY, f64::min);
        let layers = b.cfg.eval.sweep(b.m0.config.n_layers);
        let mut wins = 0;
        for id in &b.cfg.suite.probe {
            let task = b.suite.get(id)?;
            let (fv, _) = extract_fv(&b.m0, "M0", task, &b.suite.vocab, &b.heads, &b.cfg.fv)?;
            let s = layer_sweep(&b.m0, task, &b.suite.vocab, &fv.theta, InterventionMode::Add, &layers, 0, &b.cfg.eval)?;
            if s.best_val - s.plain_val >= 20.0 {
                wins += 1;
            }
            note(format!("seed {} {id}: {}", b.cfg.seed, sweep_line(&s)));
        }
        let ok = competent && wins >= 2;
        all &= ok;
        parts.push(format!("seed {}: {wins}/3 tasks +20, weakest 10-shot {weakest:.1}", b.cfg.seed));
    }
    r.record(4, all, parts.join("; "));
    Ok(())
}

fn main() {
    let mut r = Report { lines: Vec::new(), start: Instant::now() };
    if let Err(e) = run(&mut r) {
        println!("acceptance aborted: {e}");
        std::process::exit(1);
    }
    let passed = r.lines.iter().filter(|l| l.1).count();
    println!("acceptance: {passed}/{} criteria passed", r.lines.len());
    if passed != r.lines.len() {
        std::process::exit(1);
    }
}

fn run(r: &mut Report) -> fvlab::Result<()> {
    criterion_1(r)?;
    let bases: Vec<Base> = [1, 2, 3].into_iter().map(base).collect::<fvlab::Result<_>>()?;
    for b in &bases {
        let weak: Vec<String> = b.competence.tasks.iter().map(|t| format!("{} {:.0}", t.task, t.n_shot)).collect();
        note(format!("seed {} base model: {} steps, competent {}, 10-shot [{}]", b.cfg.seed, b.competence.steps, b.competence.competent, weak.join(", ")));
    }
    let b = &bases[0];
    criterion_2(r, b)?;
    criterion_3(r)?;
    criterion_4(r, &bases)?;

    let seq = &b.cfg.suite.sequence;
    let n = seq.n();
    let naive = sequence(b, Method::Naive)?;
    let fvg = sequence(b, Method::Fvg)?;
    for (name, res) in [("naive", &naive), ("fvg", &fvg)] {
        let m = &res.metrics;
        note(format!("{name}: GP {:.1} IP {:.1} FP {:.1} AP {:.1} Forget {:.1}", m.gp, m.ip, m.fp, m.ap, m.forget));
        for e in &seq.eval {
            let traj: Vec<String> = (0..=n).map(|j| format!("{:.1}", res.scores.a(e, j).unwrap_or(f64::NAN))).collect();
            note(format!("{name} {e}: {}", traj.join(" -> ")));
        }
    }

    // 5: forgetting under naive tuning
    let gp0 = mean_a(&naive.scores, &seq.eval, 0)?;
    let drop = gp0 - naive.metrics.gp;
    let naive_sim = min_self_sim(&naive, &seq.eval)?;
    r.record(5, drop >= 10.0 && naive_sim < 0.95, format!("GP {gp0:.1} -> {:.1} (drop {drop:.1}), min eval FV self-similarity {naive_sim:.3}", naive.metrics.gp));

    // 6: the most-forgotten eval task
    let mut drops = Vec::new();
    for t in &seq.eval {
        drops.push((naive.scores.a(t, 0)? - naive.scores.a(t, n)?, t.clone()));
    }
    let e = drops.iter().max_by(|a, b| a.0.total_cmp(&b.0)).expect("eval tasks").1.clone();
    let task = b.suite.get(&e)?;
    let vocab = &b.suite.vocab;
    let layers = b.cfg.eval.sweep(b.m0.config.n_layers);
    let mn = &naive.checkpoints[n];
    let source = &naive.snapshots[0].get(&e)?.theta;
    let add = layer_sweep(mn, task, vocab, source, InterventionMode::Add, &layers, 0, &b.cfg.eval)?;
    let a0 = naive.scores.a(&e, 0)?;
    let recovered = (add.best_val - add.plain_val) / (a0 - add.plain_val);
    // subtract at the stage where the task fell furthest, with that stage's training-task FV
    let j = (1..=n)
        .max_by(|&x, &y| {
            let d = |j: usize| naive.scores.a(&e, j - 1).unwrap() - naive.scores.a(&e, j).unwrap();
            d(x).total_cmp(&d(y)).then(y.cmp(&x))
        })
        .expect("nonempty sequence");
    let target = &naive.snapshots[j].get(&seq.train[j - 1])?.theta;
    let sub = layer_sweep(&naive.checkpoints[j], task, vocab, target, InterventionMode::Subtract, &layers, 0, &b.cfg.eval)?;
    let sub_gain = sub.best_val - sub.plain_val;
    let last = &naive.snapshots[n].get(&seq.train[n - 1])?.theta;
    let sub_last = layer_sweep(mn, task, vocab, last, InterventionMode::Subtract, &layers, 0, &b.cfg.eval)?;
    note(format!("add θ_{e}^0 on M{n}: {}", sweep_line(&add)));
    note(format!("subtract θ_{}^{j} on M{j}: {}", seq.train[j - 1], sweep_line(&sub)));
    note(format!("subtract θ_{}^{n} on M{n}: {}", seq.train[n - 1], sweep_line(&sub_last)));
    r.record(
        6,
        recovered >= 0.5 && sub_gain > 0.0,
        format!("{e}: add recovers {:.1}% of the {:.1}-point drop; subtract at M{j} gains {sub_gain:.1}", 100.0 * recovered, a0 - add.plain_val),
    );

    // 7: FVG against naive
    let fvg_sim = min_self_sim(&fvg, &seq.eval)?;
    let (ng, fg) = (naive.metrics.gp, fvg.metrics.gp);
    let ap_gap = (fvg.metrics.ap - naive.metrics.ap).abs();
    r.record(
        7,
        fg >= ng + 5.0 && fvg_sim > naive_sim && ap_gap <= 5.0,
        format!("GP {fg:.1} vs {ng:.1}; min FV self-similarity {fvg_sim:.3} vs {naive_sim:.3}; AP gap {ap_gap:.1}"),
    );

    // 8: correlation analytics on the naive run
    let a = analyze(&b.suite, &naive.checkpoints, &naive.snapshots, &naive.scores)?;
    let row = a.r2_for(&e).expect("row per scored task");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
    let ok8 = matches!((row.fv_self_sim, row.param_l2), (Some(s), Some(l)) if s > l)
        || matches!((row.fv_self_sim, row.param_l2), (Some(_), None));
    r.record(8, ok8, format!("{e}: R2 fv_self_sim {}, hidden_sim {}, param_l2 {}", f(row.fv_self_sim), f(row.hidden_sim), f(row.param_l2)));

    criterion_9(r)?;
    criterion_10(r, &b.m0)?;
    Ok(())
}

fn bits(m: &Model) -> Vec<u64> {
    m.flat_params().iter().map(|x| x.to_bits()).collect()
}

fn criterion_9(r: &mut Report) -> fvlab::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = common::tiny(dir.path());
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let m0 = Model::new(cfg.model_config())?;
    let probe = suite.select(&cfg.suite.probe)?;
    let (heads, _) = get_function_vector_head_set(&m0, "M0", &suite.vocab, &probe, &cfg.fv)?;
    let go = |t: TrainingConfig| {
        let setup = SequenceSetup { suite: &suite, base: &m0, head_set: &heads, train: &t, fv: &cfg.fv, eval: &cfg.eval };
        run_sequence(&setup, None)
    };
    let naive = go(TrainingConfig { method: Method::Naive, ..cfg.training.clone() })?;
    let same = |x: &SequenceResult| {
        x.checkpoints.iter().zip(&naive.checkpoints).all(|(a, b)| bits(a) == bits(b)) && x.metrics == naive.metrics
    };
    let fvg = go(TrainingConfig { method: Method::Fvg, alpha1: 0.0, alpha2: 0.0, ..cfg.training.clone() })?;
    let ewc = go(TrainingConfig { method: Method::Ewc, ewc_lambda: 0.0, ..cfg.training.clone() })?;
    let replay = go(TrainingConfig { method: Method::Replay, replay_ratio: 0.0, ..cfg.training.clone() })?;
    let avg = go(TrainingConfig { method: Method::ModelAvg, avg_rho: 0.0, ..cfg.training.clone() })?;
    let checks = [("fvg(α=0)", same(&fvg)), ("ewc(λ=0)", same(&ewc)), ("replay(0)", same(&replay)), ("model_avg(ρ=0)", same(&avg))];
    let live = go(TrainingConfig { method: Method::Fvg, ..cfg.training.clone() })?;
    let control = !same(&live);
    let ok = checks.iter().all(|c| c.1) && control;
    let desc: Vec<String> = checks.iter().map(|(n, v)| format!("{n} {v}")).collect();
    r.record(9, ok, format!("bit-exact vs naive: {}; default fvg differs: {control}", desc.join(", ")));
    Ok(())
}

fn criterion_10(r: &mut Report, m0: &Model) -> fvlab::Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(m0, &mut buf)?;
    let back = read_checkpoint(&mut buf.as_slice())?;
    let round = bits(&back) == bits(m0) && back.config == m0.config;

    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let cfg = common::tiny(dir.path());
        common::write_base(&cfg);
        cmd_find_heads(&cfg, None)?;
        let (run, _) = cmd_run_sequence(&cfg, Method::Fvg)?;
        reports.push(std::fs::read(run.join("metrics.json"))?);
    }
    let identical = reports[0] == reports[1];
    r.record(10, round && identical, format!("checkpoint round-trip bit-exact {round}; rerun metrics.json byte-identical {identical} ({} bytes)", reports[0].len()));
    Ok(())
}
