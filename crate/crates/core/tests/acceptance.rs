//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use cachesym::cache::{hit_constraint, hit_constraint_assoc, line, tag, CacheConfig, Reductions};
use cachesym::detect::Mode;
use cachesym::engine::{domains_for, Machine};
use cachesym::explore::ExploreOptions;
use cachesym::expr::Expr;
use cachesym::oracle::{replay, replay_prefix, Outcome};
use cachesym::report::{prepare, run, Adversary, RunConfig};
use cachesym::solver::{Domain, SatResult};
use common::*;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn preset_512() -> CacheConfig {
    CacheConfig::preset("paper-fig3").unwrap()
}

fn run_config(file: &str, adversary: Adversary) -> RunConfig {
    let mut rc = RunConfig::new(corpus_dir().join(file));
    rc.cache = preset_512();
    rc.adversary = adversary;
    rc
}

fn load(rc: &RunConfig) -> cachesym::ir::Program {
    let text = std::fs::read_to_string(&rc.program).unwrap();
    prepare(&text, "prog.ir", rc).unwrap()
}

const MMM: [Outcome; 3] = [Outcome::Miss, Outcome::Miss, Outcome::Miss];
const MMH: [Outcome; 3] = [Outcome::Miss, Outcome::Miss, Outcome::Hit];

fn k_env(k: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([("k".to_string(), k)])
}

fn sequential_leak() -> Check {
    let rc = run_config("seq_leaky.ir", Adversary::None);
    let report = run(&rc).map_err(|e| e.to_string())?;
    ensure(report.leaks.len() == 1, || {
        format!("{} leaks reported", report.leaks.len())
    })?;
    let leak = &report.leaks[0];
    ensure(
        leak.site.to_string() == "11" && leak.replay_confirmed,
        || format!("leak at {}", leak.site),
    )?;
    let prog = load(&rc);
    let behavior = |k: u64| {
        replay(&prog, &k_env(k), &[1, 1, 1], preset_512())
            .unwrap()
            .behavior(Some(1))
    };
    for k in [leak.k1["k"], leak.k2["k"]] {
        let want = if k == 0 { MMM } else { MMH };
        ensure(behavior(k) == want, || {
            format!("k={k} replays as {:?}", behavior(k))
        })?;
    }
    for k in 1..256 {
        ensure(behavior(k) == MMH, || {
            format!("k={k} replays as {:?}", behavior(k))
        })?;
    }
    ensure(behavior(0) == MMM, || "k=0 is not <m,m,m>".into())?;
    Ok(format!("witness k={}/{}", leak.k1["k"], leak.k2["k"]))
}

fn repair_verified() -> Check {
    let report = run(&run_config("seq_repaired.ir", Adversary::None)).map_err(|e| e.to_string())?;
    ensure(report.leaks.is_empty(), || {
        format!("{} leaks", report.leaks.len())
    })?;
    ensure(report.exit_code() == 0, || {
        format!("exit {}", report.exit_code())
    })?;
    Ok("no leaks, exit 0".into())
}

fn cli_behavior(file: &str, schedule: &str, k: u64) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_cachesym"))
        .args([
            "replay",
            file,
            "--preset",
            "paper-fig3",
            "--schedule",
            schedule,
            "--set",
        ])
        .arg(format!("k={k}"))
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    text.lines().last().unwrap_or_default().to_string()
}

fn concurrent_leak() -> Check {
    let rc = run_config("concurrent.ir", Adversary::Fixed);
    let report = run(&rc).map_err(|e| e.to_string())?;
    ensure(!report.leaks.is_empty(), || "no leak".into())?;
    let prog = load(&rc);
    let opts = ExploreOptions {
        early_termination: false,
        ..Default::default()
    };
    let ex = analyze(&prog, preset_512(), opts);
    let class3: Vec<String> = ["6", "9", "13", "11"].map(String::from).to_vec();
    for r in &ex.reports {
        let sched: Vec<String> = r.schedule.iter().map(|s| s.site.to_string()).collect();
        ensure(r.site.to_string() == "11" && sched == class3, || {
            format!("leak at {} under {:?}", r.site, sched)
        })?;
        let pair = [r.witness.k1["k"], r.witness.k2["k"]];
        ensure(pair.contains(&1), || {
            format!("witness {pair:?} does not isolate k=1")
        })?;
        let other = if pair[0] == 1 { pair[1] } else { pair[0] };
        ensure(other <= 127 && other != 1, || {
            format!("witness partner k={other}")
        })?;
    }
    ensure(report.leaks.iter().all(|l| l.replay_confirmed), || {
        "unconfirmed leak".into()
    })?;

    let file = corpus_dir().join("concurrent.ir").display().to_string();
    let classes = [
        ("1,2,1,1", 0..128),
        ("1,1,1,2", 0..128),
        ("1,1,2,1", 0..128),
        ("1,2,1,1", 128..256),
        ("1,1,1,2", 128..256),
        ("1,1,2,1", 128..256),
    ];
    for (i, (sched, ks)) in classes.into_iter().enumerate() {
        for k in ks {
            let want = if i == 2 && k == 1 {
                "critical: <miss, miss, miss>"
            } else {
                "critical: <miss, miss, hit>"
            };
            let got = cli_behavior(&file, sched, k);
            ensure(got == want, || format!("class {} k={k}: {got}", i + 1))?;
        }
    }
    Ok(format!(
        "{} report(s), all under 6-9-13-11; six classes replayed",
        ex.reports.len()
    ))
}

fn constraint_fidelity() -> Check {
    let rc = run_config("concurrent.ir", Adversary::Fixed);
    let prog = load(&rc);
    let cfg = preset_512();
    let s = session(&prog, &cfg);
    let m = Machine::new(&prog, cfg, &s);
    let mut st = m
        .initial_states()
        .into_iter()
        .find(|st| st.branches[0].taken)
        .ok_or("no then-arm state")?;
    for tid in [1, 1, 2, 1] {
        st = m
            .next_symbolic_state(&st, tid)
            .into_iter()
            .next()
            .ok_or("schedule blocked")?;
    }
    let k = Expr::var("k", 8).zext(32);
    let p = k.clone();
    let q = Expr::word(257 + 255).sub(&k);
    let tmp = Expr::word(513);
    let t = |a: &Expr| tag(&cfg, a);
    let l = |a: &Expr| line(&cfg, a);
    let rows = [
        Expr::fals(),
        t(&p).eq_(&t(&q)),
        t(&tmp)
            .eq_(&t(&p))
            .or(&t(&tmp).eq_(&t(&q)).and(&l(&tmp).ne_(&l(&p)))),
        t(&p)
            .eq_(&t(&tmp))
            .or(&t(&p).eq_(&t(&p)).and(&l(&p).ne_(&l(&tmp)))),
    ];
    let pcon = Expr::var("k", 8).ule(&Expr::constant(8, 127));
    let addrs = [&q, &p, &tmp, &p];
    for (i, row) in rows.iter().enumerate() {
        let rec = &st.trace[i];
        let differs =
            |a: &Expr, b: &Expr| matches!(s.check(&pcon.and(&a.ne_(b))), SatResult::Sat(_));
        ensure(
            !differs(&rec.pcon, &Expr::tru()) && !differs(&rec.pcon.not(), &pcon.not()),
            || format!("pcon of access {i} is not k <= 127"),
        )?;
        ensure(!differs(&rec.addr, addrs[i]), || {
            format!("address of access {i}")
        })?;
        let tau = hit_constraint(&st.trace, i, &cfg);
        ensure(!differs(&tau, row), || {
            format!("tau{i} differs from its table row")
        })?;
    }
    Ok("tau0..tau3 equivalent over k in [0,127]".into())
}

fn two_step_agreement() -> Check {
    let mut n = 0;
    for c in cases() {
        let precise = names(analyze(&c.prog, c.cfg, ExploreOptions::default()).sites());
        let opts = ExploreOptions {
            mode: Mode::TwoStep,
            ..Default::default()
        };
        let two = names(analyze(&c.prog, c.cfg, opts).sites());
        ensure(precise == two, || {
            format!("{}: precise {precise:?} vs two-step {two:?}", c.name)
        })?;
        n += 1;
    }
    Ok(format!("{n} corpus configurations"))
}

fn random_valuation(
    rng: &mut StdRng,
    vars: &BTreeMap<std::sync::Arc<str>, u32>,
    dom: &cachesym::solver::Domains,
) -> BTreeMap<String, u64> {
    vars.iter()
        .map(|(n, w)| {
            let d = dom.get(n);
            let v = match d {
                Domain::Full => rng.gen_range(0..(1u64 << w)),
                _ => d.nth(rng.gen_range(0..d.len(*w) as u64)),
            };
            (n.to_string(), v)
        })
        .collect()
}

fn oracle_equivalence() -> Check {
    let all = cases();
    let mut compared = 0;
    for c in all
        .iter()
        .filter(|c| c.entry.key_bits <= 12 && c.gamma_events() <= 8)
    {
        let ex = names(analyze(&c.prog, c.cfg, ExploreOptions::default()).sites());
        let brute = brute_sites(&c.prog, c.cfg, c.entry.key_bits);
        ensure(ex == brute, || {
            format!("{}: explorer {ex:?} vs brute force {brute:?}", c.name)
        })?;
        compared += 1;
    }

    let mut rng = StdRng::seed_from_u64(7);
    let runs: Vec<_> = all
        .iter()
        .map(|c| {
            let s = session(&c.prog, &c.cfg);
            let m = Machine::new(&c.prog, c.cfg, &s);
            all_runs(&m)
        })
        .collect();
    let (mut probes, mut tries) = (0, 0);
    while probes < 10_000 {
        tries += 1;
        ensure(tries < 1_000_000, || "too few feasible probes".into())?;
        let ci = rng.gen_range(0..all.len());
        let c = &all[ci];
        let st = &runs[ci][rng.gen_range(0..runs[ci].len())];
        if st.trace.is_empty() {
            continue;
        }
        let i = rng.gen_range(0..st.trace.len());
        let mut vars = st.pcon.free_vars();
        for r in &st.trace {
            vars.extend(r.addr.free_vars());
        }
        let dom = domains_for(&c.prog, &c.cfg);
        let env = random_valuation(&mut rng, &vars, &dom);
        if st.pcon.eval_map(&env) != 1 {
            continue;
        }
        let tau = hit_constraint_assoc(&st.trace, i, &c.cfg, 64).map_err(|e| e.to_string())?;
        let exec =
            replay_prefix(&c.prog, &env, &st.schedule[..=i], c.cfg).map_err(|e| e.to_string())?;
        let concrete = exec.accesses[i].outcome == Outcome::Hit;
        ensure((tau.eval_map(&env) == 1) == concrete, || {
            format!("{}: access {i} under {env:?}", c.name)
        })?;
        probes += 1;
    }
    Ok(format!(
        "{compared} programs vs brute force, {probes} probes, 0 mismatches"
    ))
}

fn set_associative() -> Check {
    let mut notes = Vec::new();
    for cfg in [
        CacheConfig::new(2048, 1, 4).unwrap(),
        CacheConfig::new(8, 1, 4).unwrap(),
    ] {
        for file in ["seq_leaky.ir", "seq_repaired.ir", "concurrent.ir"] {
            let mut rc = run_config(file, Adversary::Fixed);
            rc.cache = cfg;
            let prog = load(&rc);
            let ex = names(analyze(&prog, cfg, ExploreOptions::default()).sites());
            let brute = brute_sites(&prog, cfg, 8);
            ensure(ex == brute, || {
                format!("{file} at {cfg:?}: explorer {ex:?} vs 4-way oracle {brute:?}")
            })?;
            notes.push(format!("{file}@{}B:{}", cfg.cache_size, ex.len()));
        }
    }
    // The running example never overflows a 4-way set; the S-box tables do.
    let mut leaky = 0;
    for cfg in [
        CacheConfig::new(64, 4, 4).unwrap(),
        CacheConfig::new(32, 4, 4).unwrap(),
    ] {
        for c in cases()
            .into_iter()
            .filter(|c| c.is_sbox() && c.entry.key_bits <= 12)
        {
            let c = c.with_cache(cfg);
            let ex = names(analyze(&c.prog, cfg, ExploreOptions::default()).sites());
            let brute = brute_sites(&c.prog, cfg, c.entry.key_bits);
            ensure(ex == brute, || {
                format!(
                    "{} at {cfg:?}: explorer {ex:?} vs 4-way oracle {brute:?}",
                    c.name
                )
            })?;
            leaky += ex.len();
        }
    }
    notes.push(format!("S-box 4-way sites:{leaky}"));

    let mut queries = 0;
    for c in cases() {
        let s = session(&c.prog, &c.cfg);
        let direct = CacheConfig { ways: 1, ..c.cfg };
        for trace in traces(&c.prog, c.cfg, &s) {
            for i in 0..trace.len() {
                let a = hit_constraint(&trace, i, &direct);
                let b = hit_constraint_assoc(&trace, i, &direct, 64).map_err(|e| e.to_string())?;
                let q = trace[i].pcon.and(&a.ne_(&b));
                ensure(s.check(&q) == SatResult::Unsat, || {
                    format!("{}: W=1 mismatch at access {i}", c.name)
                })?;
                queries += 1;
            }
        }
    }
    Ok(format!(
        "leak counts {}; {queries} W=1 equivalence checks",
        notes.join(" ")
    ))
}

fn reduction_safety() -> Check {
    let mut rows = Vec::new();
    for c in cases() {
        let on = analyze(&c.prog, c.cfg, ExploreOptions::default());
        let raw = ExploreOptions {
            reductions: Reductions::none(),
            ..Default::default()
        };
        let off = analyze(&c.prog, c.cfg, raw);
        ensure(names(on.sites()) == names(off.sites()), || {
            format!("{}: sites change", c.name)
        })?;
        if c.is_sbox() {
            let (a, b) = (on.stats.solver_calls, off.stats.solver_calls);
            ensure(a < b, || {
                format!(
                    "{}: {a} solver calls with reductions vs {b} without",
                    c.name
                )
            })?;
            rows.push(format!("{a}<{b}"));
        }
    }
    Ok(format!("S-box solver calls {}", rows.join(" ")))
}

fn main() {
    let criteria: [Criterion; 8] = [
        (
            1,
            "sequential leak",
            Duration::from_secs(5),
            sequential_leak,
        ),
        (
            2,
            "repair verified",
            Duration::from_secs(5),
            repair_verified,
        ),
        (
            3,
            "concurrent leak",
            Duration::from_secs(60),
            concurrent_leak,
        ),
        (
            4,
            "constraint fidelity",
            Duration::from_secs(10),
            constraint_fidelity,
        ),
        (
            5,
            "two-step vs precise",
            Duration::from_secs(600),
            two_step_agreement,
        ),
        (
            6,
            "oracle equivalence",
            Duration::from_secs(600),
            oracle_equivalence,
        ),
        (
            7,
            "set-associative consistency",
            Duration::from_secs(300),
            set_associative,
        ),
        (
            8,
            "reduction safety",
            Duration::from_secs(600),
            reduction_safety,
        ),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > limit => Err(format!("{msg}; took {took:.1?}, limit {limit:?}")),
            r => r,
        };
        match result {
            Ok(msg) => println!("criterion {n} ({name}): PASS [{took:.1?}] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{took:.1?}] {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
