use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};
use switchode::env_chain::{EnvGenerator, EnvKind};
use switchode::expansion;
use switchode::lotka;
use switchode::lyapunov::{self, Certificate, CertifyOptions, SwitchedLinearSystem};
use switchode::model_file::{FieldSpec, ModelFile};
use switchode::pdmp_sim::SimConfig;
use switchode::rng;
use switchode::splitting::{self, Estimator, Functional, SplitScheme};
use switchode::validation::{self, Suite};

use crate::output::{self, cell, Csv, ResultRecord};
use crate::{
    CertifyArgs, Command, EnvCmd, ExpandArgs, Failure, LvCmd, LvMcArgs, LyapunovCmd, LyapunovMcArgs, McArgs, ModelArgs,
    ReproduceArgs, SemigroupArgs, SignsArgs, SplitArgs, SplitCmd, SweepArgs,
};

type Outcome = Result<(), Failure>;

struct Ctx<'a> {
    seed: u64,
    out: Option<&'a Path>,
}

impl Ctx<'_> {
    fn record(&self, command: &str, args: &impl Serialize, model: Option<&ModelFile>, outputs: Value) -> Outcome {
        let mut inputs = json!({ "args": args });
        if let Some(m) = model {
            inputs["model"] = serde_json::to_value(m).expect("model files serialize");
        }
        let rec = ResultRecord::new(command, self.seed, inputs, outputs);
        Ok(output::emit(self.out, &output::json(&rec))?)
    }

    fn csv(&self, csv: Csv) -> Outcome {
        Ok(output::emit(self.out, &csv.finish())?)
    }
}

pub fn run(command: Command, seed: u64, out: Option<&Path>) -> Outcome {
    let ctx = Ctx { seed, out };
    match command {
        Command::Expand(a) => expand(&ctx, &a),
        Command::Semigroup(a) => semigroup(&ctx, &a),
        Command::Lyapunov(LyapunovCmd::Sweep(a)) => sweep(&ctx, &a),
        Command::Lyapunov(LyapunovCmd::Mc(a)) => lyapunov_mc(&ctx, &a),
        Command::Lyapunov(LyapunovCmd::Certify(a)) => certify(&ctx, &a),
        Command::Lv(LvCmd::C1(a)) => lv_c1(&ctx, &a),
        Command::Lv(LvCmd::Mc(a)) => lv_mc(&ctx, &a),
        Command::Lv(LvCmd::Signs(a)) => lv_signs(&ctx, &a),
        Command::Split(SplitCmd::WeakError(a)) => split(&ctx, &a, false),
        Command::Split(SplitCmd::Richardson(a)) => split(&ctx, &a, true),
        Command::Env(EnvCmd::Check(a)) => env_check(&ctx, &a),
        Command::Reproduce(a) => reproduce(&ctx, &a),
    }
}

fn load(path: &Path) -> Result<ModelFile, Failure> {
    let file = ModelFile::load(path)?;
    file.validate()?;
    Ok(file)
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("outputs serialize")
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn need_eps(eps: &[f64], min: usize) -> Result<(), Failure> {
    if eps.len() < min {
        return Err(Failure::Input(format!("need at least {min} --eps values")));
    }
    Ok(())
}

fn sim_config(mc: &McArgs, eps: f64, seed: u64) -> Result<SimConfig, Failure> {
    let mut cfg = SimConfig::new(eps, mc.horizon);
    cfg.burn_in = mc.burn_in;
    cfg.n_traj = mc.traj;
    cfg.sample_dt = None;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Input(format!("grid '{spec}' is neither lo:step:hi nor a comma list"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let grid: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec.split(':').map(num).collect::<Result<_, _>>()?;
        let [lo, step, hi] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || hi < lo {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // round to the step's decimal precision so 0.01:0.01:0.99 prints cleanly
        (0..=n)
            .map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12)
            .collect()
    } else {
        spec.split(',').map(num).collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Failure::Input("grid values must lie in (0, 1)".into()));
    }
    Ok(grid)
}

fn pair(file: &ModelFile) -> Result<(DMatrix<f64>, DMatrix<f64>), Failure> {
    let ms = file.projective_matrices()?;
    match <[DMatrix<f64>; 2]>::try_from(ms) {
        Ok([a0, a1]) => Ok((a0, a1)),
        Err(ms) => Err(Failure::Input(format!("need two matrices, model has {}", ms.len()))),
    }
}

fn expand(ctx: &Ctx, a: &ExpandArgs) -> Outcome {
    let file = load(&a.model)?;
    let model = file.model()?;
    let f = file.observable()?;
    let x_init = file.x0.as_ref().map(|x| DVector::from_column_slice(x));
    let report = expansion::c1_generic(&model, &f, x_init.as_ref())?;
    let mut outputs = json!({ "expansion": to_value(&report) });
    if !a.mc.eps.is_empty() {
        need_eps(&a.mc.eps, 3)?;
        let base = sim_config(&a.mc, a.mc.eps[0], ctx.seed)?;
        let check = expansion::mc_slope_check(&model, &f, report.mu0_f, &a.mc.eps, &base)?;
        outputs["slope_check"] = to_value(&check);
        outputs["residual_slope"] = json!(check.residual_slope(report.c1));
        outputs["c1_sigmas"] = json!((check.c1 - report.c1).abs() / check.c1_se);
    }
    ctx.record("expand", a, Some(&file), outputs)?;
    if report.converged {
        Ok(())
    } else {
        Err(Failure::Unconverged)
    }
}

fn semigroup(ctx: &Ctx, a: &SemigroupArgs) -> Outcome {
    let file = load(&a.model)?;
    let model = file.model()?;
    let f = file.observable()?;
    let x = file
        .x0
        .as_ref()
        .map_or_else(|| model.default_start(), |x| DVector::from_column_slice(x));
    let s = file.s0.unwrap_or(0);
    if !(a.t > 0.0 && a.t.is_finite()) {
        return Err(Failure::Input(format!("t must be positive, got {}", a.t)));
    }
    let p1 = expansion::semigroup_order1(&model, &f, a.t, &x, s)?;
    let (p0, _) = expansion::semigroup_order0(&model, &f, a.t, 0.0, &x, s)?;
    let mut table = Vec::new();
    for &eps in &a.eps {
        if !(eps > 0.0) {
            return Err(Failure::Input(format!("epsilon must be positive, got {eps}")));
        }
        let (_, layer) = expansion::semigroup_order0(&model, &f, a.t, a.t / eps, &x, s)?;
        table.push(json!({
            "epsilon": eps,
            "layer": layer,
            "order0": p0 + layer,
            "order1": p0 + layer + eps * p1.value,
        }));
    }
    let outputs = json!({
        "x": x.as_slice(),
        "s": s,
        "p0": p0,
        "p1": to_value(&p1),
        "table": table,
    });
    ctx.record("semigroup", a, Some(&file), outputs)?;
    if p1.converged {
        Ok(())
    } else {
        Err(Failure::Unconverged)
    }
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Outcome {
    let file = load(&a.model)?;
    let (a0, a1) = pair(&file)?;
    let grid = parse_grid(&a.grid)?;
    let rows = lyapunov::sweep_p(&a0, &a1, &grid)?;
    let mut csv = Csv::new("lyapunov sweep", ctx.seed, &["p", "lambda_max", "c1"]);
    csv.comment(&format!("model: {}", file.name.as_deref().unwrap_or("unnamed")));
    csv.comment("pi = (1 - p, p)");
    if let Some(peak) = lyapunov::sweep_peak(&rows) {
        csv.comment(&format!("argmax p = {}, lambda_max = {}", peak.p, peak.lambda_max));
    }
    for r in &rows {
        csv.row(&[cell(r.p), cell(r.lambda_max), cell(r.c1)]);
    }
    ctx.csv(csv)
}

fn lyapunov_mc(ctx: &Ctx, a: &LyapunovMcArgs) -> Outcome {
    let file = load(&a.model)?;
    need_eps(&a.mc.eps, 1)?;
    let sys = match a.p {
        Some(p) => {
            let (a0, a1) = pair(&file)?;
            SwitchedLinearSystem::two_state(a0, a1, p)?
        }
        None => file.switched_linear()?,
    };
    let pp = lyapunov::perron(&sys)?;
    let c1 = lyapunov::c1_closed_form(&sys, &pp)?;
    let mut table = Vec::new();
    let mut consistent = true;
    for (k, &eps) in a.mc.eps.iter().enumerate() {
        let cfg = sim_config(&a.mc, eps, rng::derive_seed(ctx.seed, k as u64))?;
        let est = lyapunov::lyapunov_mc(&sys, &cfg)?;
        consistent &= est.consistent();
        table.push(json!({
            "epsilon": eps,
            "first_order": pp.lambda_max + eps * c1,
            "log_growth": { "mean": est.log_growth.mean, "std_error": est.log_growth.std_error },
            "ergodic": { "mean": est.ergodic.mean, "std_error": est.ergodic.std_error },
            "discrepancy_sigmas": est.discrepancy_sigmas,
            "seed": cfg.seed,
        }));
    }
    let outputs = json!({ "lambda_max": pp.lambda_max, "c1": c1, "table": table });
    ctx.record("lyapunov mc", a, Some(&file), outputs)?;
    if consistent {
        Ok(())
    } else {
        Err(Failure::Unconverged)
    }
}

fn certify(ctx: &Ctx, a: &CertifyArgs) -> Outcome {
    let file = load(&a.model)?;
    let (a0, a1) = pair(&file)?;
    let cfg = sim_config(&a.mc, a.mc.eps.first().copied().unwrap_or(0.1), ctx.seed)?;
    let mut opts = CertifyOptions::standard(cfg);
    opts.p_grid = parse_grid(&a.grid)?;
    opts.margin = a.margin;
    if !a.mc.eps.is_empty() {
        opts.eps_grid = a.mc.eps.clone();
    }
    let cert = lyapunov::destabilization_certificate(&a0, &a1, &opts)?;
    let found = matches!(cert, Certificate::Found { .. });
    ctx.record(
        "lyapunov certify",
        a,
        Some(&file),
        json!({ "certificate": to_value(&cert) }),
    )?;
    if found {
        Ok(())
    } else {
        Err(Failure::Unconverged)
    }
}

fn lv_c1(ctx: &Ctx, a: &ModelArgs) -> Outcome {
    let file = load(&a.model)?;
    let coef = file.lv_coefficients()?;
    let env = file.env()?;
    let pi = env.stationary()?;
    let c1 = lotka::c1_closed_form(&coef, &env)?;
    let (p0, p1) = coef.bounds();
    let mut outputs = json!({
        "pi": pi.as_slice(),
        "bounds": [p0, p1],
        "lambda0": lotka::lambda0(&coef, &pi),
        "c1": c1,
    });
    if let EnvKind::RateMatrix(gen) = &env {
        if gen.n() == 2 {
            outputs["signs"] = to_value(&lotka::sign_analysis(&coef, gen)?);
        }
    }
    ctx.record("lv c1", a, Some(&file), outputs)
}

fn lv_mc(ctx: &Ctx, a: &LvMcArgs) -> Outcome {
    let file = load(&a.model)?;
    need_eps(&a.mc.eps, 1)?;
    let coef = file.lv_coefficients()?;
    let env = file.env()?;
    let pi = env.stationary()?;
    let lambda0 = lotka::lambda0(&coef, &pi);
    let c1 = lotka::c1_closed_form(&coef, &env)?;
    let mut table = Vec::new();
    for (k, &eps) in a.mc.eps.iter().enumerate() {
        let mut cfg = sim_config(&a.mc, eps, rng::derive_seed(ctx.seed, k as u64))?;
        cfg.x0 = file.x0.clone();
        cfg.s0 = file.s0;
        let est = lotka::invasion_rate_mc(&coef, &env, &cfg)?;
        table.push(json!({
            "epsilon": eps,
            "first_order": lambda0 + eps * c1,
            "mean": est.mean,
            "std_error": est.std_error,
            "seed": cfg.seed,
        }));
    }
    let outputs = json!({ "lambda0": lambda0, "c1": c1, "table": table });
    ctx.record("lv mc", a, Some(&file), outputs)
}

fn lv_signs(ctx: &Ctx, a: &SignsArgs) -> Outcome {
    if a.draws == 0 {
        return Err(Failure::Input("draws must be positive".into()));
    }
    let mut r = rng::stream(ctx.seed, 0);
    let header = ["draw", "rate01", "rate10", "c1", "product", "tie", "agree"];
    let mut csv = Csv::new("lv signs", ctx.seed, &header);
    let (mut checked, mut agreed) = (0, 0);
    let mut lines = Vec::new();
    for k in 0..a.draws {
        let coef = validation::random_lv(&mut r)?;
        let (p, q) = (r.random_range(0.2..3.0), r.random_range(0.2..3.0));
        let rep = lotka::sign_analysis(&coef, &EnvGenerator::two_state(p, q)?)?;
        if let Some(ok) = rep.agree {
            checked += 1;
            agreed += usize::from(ok);
        }
        let agree = rep.agree.map_or("na".to_string(), |b| b.to_string());
        lines.push(vec![
            k.to_string(),
            cell(p),
            cell(q),
            cell(rep.c1),
            cell(rep.product),
            rep.tie.to_string(),
            agree,
        ]);
    }
    csv.comment(&format!("sign rule held on {agreed} of {checked} non-tied draws"));
    for l in &lines {
        csv.row(l);
    }
    ctx.csv(csv)
}

fn split(ctx: &Ctx, a: &SplitArgs, richardson: bool) -> Outcome {
    let file = load(&a.model)?;
    need_eps(&a.eps, 1)?;
    let spec = file
        .fields
        .as_ref()
        .ok_or_else(|| Failure::Input("model file has no fields block".into()))?;
    let fields = spec.build()?;
    let x0 = file
        .x0
        .as_ref()
        .map(|x| DVector::from_column_slice(x))
        .ok_or_else(|| Failure::Input("split needs x0 in the model file".into()))?;
    let obs = file
        .observable
        .as_ref()
        .ok_or_else(|| Failure::Input("split needs an observable in the model file".into()))?;
    // the split evaluates f through state 0; a state-dependent f has no meaning here
    let same = |v: &[Vec<f64>]| v.windows(2).all(|w| w[0] == w[1]);
    if obs.c.windows(2).any(|w| w[0] != w[1])
        || !same(&obs.b)
        || obs.m.as_ref().is_some_and(|m| m.windows(2).any(|w| w[0] != w[1]))
    {
        return Err(Failure::Input("split observables must not depend on the state".into()));
    }
    let f_obs = obs.build()?;
    let f = move |x: &DVector<f64>| f_obs.eval(x, 0);
    let linear = matches!(spec, FieldSpec::Linear { .. }) && obs.m.is_none() && obs.c.iter().all(|c| *c == 0.0);
    let func = Functional {
        f: &f,
        linear: linear.then(|| DVector::from_column_slice(&obs.b[0])),
    };
    let est = match a.mc {
        Some(n_mc) => Estimator::MonteCarlo { n_mc, seed: ctx.seed },
        None if func.linear.is_some() => Estimator::ExactLinear,
        None => {
            return Err(Failure::Input(
                "exact means need linear fields and a linear observable; pass --mc".into(),
            ))
        }
    };
    let scheme = SplitScheme::new(fields, a.eps[0])?;
    let name = if richardson {
        "split richardson"
    } else {
        "split weak-error"
    };
    let mut csv;
    if richardson {
        let table = splitting::richardson_table(&scheme, &func, &x0, a.t, &a.eps, est)?;
        csv = Csv::new(name, ctx.seed, &["eps", "raw_error", "error", "stderr"]);
        for r in &table {
            csv.row(&[
                cell(r.epsilon),
                cell(r.raw_error),
                cell(r.extrapolated_error),
                cell(r.std_error),
            ]);
        }
    } else {
        let table = splitting::weak_error(&scheme, &func, &x0, a.t, &a.eps, est)?;
        csv = Csv::new(name, ctx.seed, &["eps", "error", "stderr"]);
        for r in &table {
            csv.row(&[cell(r.epsilon), cell(r.error), cell(r.std_error)]);
        }
    }
    csv.comment(&format!("t = {}", a.t));
    csv.comment(&match est {
        Estimator::ExactLinear => "estimator: exact".to_string(),
        Estimator::MonteCarlo { n_mc, .. } => format!("estimator: monte carlo, {n_mc} replicates"),
    });
    ctx.csv(csv)
}

fn env_check(ctx: &Ctx, a: &ModelArgs) -> Outcome {
    let file = ModelFile::load(&a.model)?;
    let env = file.env()?;
    let pi = env.stationary()?;
    let x = env.pseudo_inverse()?;
    let outputs = json!({
        "states": env.n(),
        "pi": pi.as_slice(),
        "spectral_gap": env.spectral_gap(),
        "pseudo_inverse": rows(x.matrix()),
    });
    ctx.record("env check", a, Some(&file), outputs)
}

fn reproduce(ctx: &Ctx, a: &ReproduceArgs) -> Outcome {
    let suite: Suite = a.suite.parse()?;
    let reports = validation::run_suite(suite, ctx.seed);
    let mut table = String::new();
    for r in &reports {
        table.push_str(&format!("{r}\n"));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    match ctx.out {
        Some(path) => {
            print!("{table}");
            let rec = ResultRecord::new(
                "reproduce",
                ctx.seed,
                json!({ "args": a }),
                json!({ "criteria": to_value(&reports) }),
            );
            output::emit(Some(path), &output::json(&rec))?;
        }
        None => print!("{table}"),
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::CriteriaFailed(failed))
    }
}
