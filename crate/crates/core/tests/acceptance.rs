//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines always reach the terminal.

use std::time::Instant;

use ecrf_core::checkpoint::{Checkpoint, NamedTensor};
use ecrf_core::config::{net_from_checkpoint, net_to_checkpoint, RunConfig};
use ecrf_core::error::Error;
use ecrf_core::gridcore::LabelMap;
use ecrf_core::metrics::{adjacency_counts, boundary_fscore, miou};
use ecrf_core::toynet::{variant_mean, Benchmark, Net, RunSummary, Variant};
use ecrf_core::verify::{self, CheckRow};

const SEED: u64 = 20240;
const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_BUDGET_S: f64 = 20.0 * 60.0;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    /// Trained-model trends; gate the exit status only under ECRF_STRICT=1.
    empirical: bool,
}

fn from_rows(name: &'static str, rows: &[CheckRow], extra: Option<(bool, String)>) -> Outcome {
    for r in rows {
        println!("    {r}");
    }
    let mut passed = rows.iter().all(|r| r.passed);
    let mut detail = format!("{}/{} checks", rows.iter().filter(|r| r.passed).count(), rows.len());
    if let Some((ok, note)) = extra {
        passed &= ok;
        detail.push_str(&format!("; {note}"));
    }
    Outcome { name, passed, detail, empirical: false }
}

fn gradient_theory() -> Outcome {
    let t = Instant::now();
    let rows = verify::gradtheory_suite(100, SEED, 1e-6).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let fd: Vec<CheckRow> = rows.iter().filter(|r| r.name.contains(" vs ")).cloned().collect();
    from_rows("gradient theory: analytic grads vs FD, rel err <= 1e-8, 100 cases, < 10 s", &fd, Some((secs < 10.0, format!("{secs:.2} s"))))
}

fn collinearity() -> Outcome {
    let rows = verify::gradtheory_suite(100, SEED, 1e-6).expect("suite runs");
    let picked: Vec<CheckRow> =
        rows.into_iter().filter(|r| !r.name.contains(" vs ")).collect();
    from_rows("collinearity: joint cross-norm <= 1e-12, e-crf cos < 1 - 1e-9", &picked, None)
}

fn angles() -> Outcome {
    let t = Instant::now();
    let rows = verify::angle_suite(100, SEED).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    from_rows("angle ordering theta1 < theta2 < theta3, canonical + 100 random, < 5 s", &rows, Some((secs < 5.0, format!("{secs:.2} s"))))
}

fn ecrf_layer() -> Outcome {
    let rows = verify::ecrf_layer_suite(100, SEED, 1e-6).expect("suite runs");
    from_rows("e-crf layer: backward vs FD <= 1e-6 over 100 configs, identity bit-exact", &rows, None)
}

fn mean_field() -> Outcome {
    let rows = verify::mean_field_suite(50, SEED).expect("suite runs");
    from_rows("mean-field vs triple-loop oracle within 1e-10, 50 seeds", &rows, None)
}

fn slic() -> Outcome {
    let rows = verify::slic_suite(100, SEED).expect("suite runs");
    from_rows("slic: partition, 4-connectivity, determinism on 100 images; uniform aspect in [0.5, 2]", &rows, None)
}

fn trend_runs() -> (Vec<RunSummary>, f64) {
    let bench = Benchmark::default();
    let t = Instant::now();
    let mut runs = Vec::new();
    println!("    {}", RunSummary::CSV_HEADER);
    for seed in TREND_SEEDS {
        let data = bench.data(seed).expect("benchmark data");
        for v in Variant::ALL {
            let r = bench.run(&data, v).expect("benchmark run");
            println!("    {}", r.csv_row());
            runs.push(r);
        }
    }
    (runs, t.elapsed().as_secs_f64())
}

fn trend(runs: &[RunSummary], secs: f64) -> Outcome {
    let m = |v| variant_mean(runs, v, |r| r.miou);
    let f = |v| variant_mean(runs, v, |r| r.boundary_f);
    for v in Variant::ALL {
        println!("    mean {:<16} miou={:.4} boundary_f={:.4}", v.name(), m(v), f(v));
    }
    let (b, j, e) = (Variant::Baseline, Variant::Joint, Variant::Ecrf);
    let checks = [
        ("miou baseline <= joint", m(b) <= m(j)),
        ("miou joint <= ecrf", m(j) <= m(e)),
        ("boundary_f baseline <= joint", f(b) <= f(j)),
        ("boundary_f joint <= ecrf", f(j) <= f(e)),
        ("ecrf - baseline miou > 0", m(e) - m(b) > 0.0),
        ("pairwise-only beats baseline", m(Variant::PairwiseOnly) > m(b)),
        ("superpixel-only beats baseline", m(Variant::SuperpixelOnly) > m(b)),
        ("total time <= 20 min", secs <= TREND_BUDGET_S),
    ];
    for (name, ok) in &checks {
        println!("    {} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    let held = checks.iter().filter(|c| c.1).count();
    Outcome {
        name: "directional trend over 5 seeds: baseline <= joint <= ecrf, ablations beat baseline",
        passed: held == checks.len(),
        detail: format!("{held}/{} conditions; {secs:.0} s", checks.len()),
        empirical: true,
    }
}

fn bcwc(runs: &[RunSummary]) -> Outcome {
    let base = variant_mean(runs, Variant::Baseline, |r| r.bcwc_top);
    let ecrf = variant_mean(runs, Variant::Ecrf, |r| r.bcwc_top);
    Outcome {
        name: "bcwc: top-10 adjacency similarity lower for ecrf than baseline over 5 seeds",
        passed: ecrf < base,
        detail: format!("baseline {base:.4}, ecrf {ecrf:.4}"),
        empirical: true,
    }
}

fn checkpoint() -> Outcome {
    let cfg = RunConfig::default();
    let net = Net::<f32>::init(cfg.net.clone(), SEED).expect("init");
    let ckpt = net_to_checkpoint(&net, &cfg, None, 0);
    let bytes = ckpt.to_bytes().expect("serialize");
    let mut checks = Vec::new();
    checks.push(("byte-deterministic", ckpt.to_bytes().expect("serialize") == bytes));
    let back = Checkpoint::from_bytes(&bytes).expect("parse");
    let bit_exact = back.tensors.len() == ckpt.tensors.len()
        && back.tensors.iter().zip(&ckpt.tensors).all(|(a, b): (&NamedTensor, &NamedTensor)| {
            a.name == b.name && a.dims == b.dims && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    checks.push(("tensors bit-exact", bit_exact));
    let restored = net_from_checkpoint(&back).expect("restore");
    checks.push(("network restored", restored.net == net && restored.config == cfg));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    checks.push(("bad magic -> format error", matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_)))));
    let mut future = bytes.clone();
    future[5..9].copy_from_slice(&99u32.to_le_bytes());
    checks.push(("future version -> version error", matches!(Checkpoint::from_bytes(&future), Err(Error::Version(99)))));
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    checks.push(("corrupted payload -> format error", matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_)))));
    checks.push(("truncated -> error", Checkpoint::from_bytes(&bytes[..bytes.len() / 3]).is_err()));
    summarize("checkpoint round trip bit-exact, negative cases rejected", &checks)
}

fn labels(h: usize, w: usize, classes: usize, f: impl Fn(usize, usize) -> u32) -> LabelMap {
    LabelMap::new(h, w, classes, (0..h * w).map(|i| f(i / w, i % w)).collect()).expect("valid fixture")
}

fn metric_fixtures() -> Outcome {
    let mut checks = Vec::new();
    // Top half class 0; two pixels flipped each way.
    let gt = labels(4, 4, 2, |r, _| u32::from(r >= 2));
    let mut pred_ids: Vec<u32> = gt.labels().to_vec();
    for i in [0, 1] {
        pred_ids[i] = 1;
    }
    for i in [14, 15] {
        pred_ids[i] = 0;
    }
    let pred = LabelMap::new(4, 4, 2, pred_ids).expect("fixture");
    let report = miou(&pred, &gt, 2).expect("miou");
    checks.push(("miou 4x4 fixture = 0.6", report.mean == 0.6 && report.per_class == vec![Some(0.6), Some(0.6)]));
    checks.push(("miou perfect = 1", miou(&gt, &gt, 2).expect("miou").mean == 1.0));
    let zero = labels(4, 4, 2, |_, _| 0);
    let one = labels(4, 4, 2, |_, _| 1);
    let disjoint = miou(&zero, &one, 2).expect("miou");
    checks.push(("miou disjoint = 0 per class", disjoint.per_class == vec![Some(0.0), Some(0.0)]));

    let split = |col: usize| labels(8, 8, 2, move |_, c| u32::from(c >= col));
    checks.push(("boundary F split 4 vs 5 = 1", boundary_fscore(&split(5), &split(4), 1).expect("bf") == 1.0));
    checks.push(("boundary F split 4 vs 6 = 0", boundary_fscore(&split(6), &split(4), 1).expect("bf") == 0.0));
    checks.push(("boundary F perfect = 1", boundary_fscore(&split(4), &split(4), 1).expect("bf") == 1.0));
    checks.push(("boundary F uniform pred = 0", boundary_fscore(&zero, &gt, 1).expect("bf") == 0.0));

    let adj = adjacency_counts(&labels(7, 6, 2, |_, c| u32::from(c >= 3)), 2).expect("adjacency");
    checks.push(("adjacency 7-row split = 7", adj == vec![0, 7, 7, 0]));
    checks.push(("adjacency uniform = 0", adjacency_counts(&zero, 2).expect("adjacency").iter().all(|&c| c == 0)));
    summarize("metric fixtures: miou, boundary F, adjacency exact", &checks)
}

fn summarize(name: &'static str, checks: &[(&str, bool)]) -> Outcome {
    for (n, ok) in checks {
        println!("    {} {n}", if *ok { "PASS" } else { "FAIL" });
    }
    let held = checks.iter().filter(|c| c.1).count();
    Outcome { name, passed: held == checks.len(), detail: format!("{held}/{} checks", checks.len()), empirical: false }
}

fn main() {
    // `cargo test -- <filter>` passes arguments; a filter that names no
    // criterion section skips the whole target.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let skip_trend = std::env::var("ECRF_SKIP_TREND").is_ok_and(|v| v == "1");
    let mut outcomes = Vec::new();
    let mut run = |f: &dyn Fn() -> Outcome| {
        let o = f();
        println!("{} {}  [{}]", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        outcomes.push(o);
    };
    run(&gradient_theory);
    run(&collinearity);
    run(&angles);
    run(&ecrf_layer);
    run(&mean_field);
    run(&slic);
    if skip_trend {
        println!("SKIP directional trend and bcwc (ECRF_SKIP_TREND=1)");
    } else {
        let (runs, secs) = trend_runs();
        run(&|| trend(&runs, secs));
        run(&|| bcwc(&runs));
    }
    run(&checkpoint);
    run(&metric_fixtures);
    let strict = std::env::var("ECRF_STRICT").is_ok_and(|v| v == "1");
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let gating = outcomes.iter().filter(|o| !o.passed && (strict || !o.empirical)).count();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > gating {
        println!("acceptance: {} empirical criteria failed; set ECRF_STRICT=1 to make them fatal", failed - gating);
    }
    if gating > 0 {
        std::process::exit(1);
    }
}
