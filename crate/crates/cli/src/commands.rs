use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::DVector;
use serde_json::{json, Value};

use unisafe::bench::{run_bench, BenchConfig, BenchController};
use unisafe::nn::{
    mse, sample_dataset, sample_state_dataset, split_indices, train as train_model, warmstart_solve,
    Dataset, MlpModel, NnController, TrainConfig, WarmstartController,
};
use unisafe::params::{find_interior_point, DEFAULT_FEAS_BUDGET};
use unisafe::qp::project_onto_polytope;
use unisafe::sim::{
    make_example_1, make_example_2, metrics, simulate as run_simulation, simulate_interconnection, ControlProblem,
    Controller, Example1, ExactController, Mode, QpController, Simulation, Trajectory, Warmstart,
};
use unisafe::solver::{closed_form_1d, solve as newton, solve_gradient_flow, u_star, SolveResult, SolveStatus, SolverOptions};
use unisafe::{ConstraintParams, Objective};

use crate::error::{CliError, CliResult, EXIT_DATA};
use crate::input::{constraint_params, existing, parse_list, sibling};
use crate::{
    BenchArgs, BenchControllerArg, ControllerArg, DatasetArgs, EvalArgs, ExampleArg, InspectArgs, Method, ModeArg,
    ProblemArgs, SimulateArgs, SolveArgs, TrainArgs,
};

/// Hard-mode outputs count as satisfying when every margin is at most this.
const HARD_MARGIN_TOL: f64 = 1e-9;

fn print_json(value: &Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn params_of(args: &ProblemArgs) -> CliResult<ConstraintParams> {
    constraint_params(args.a.as_deref(), args.b.as_deref(), args.problem.as_deref())
}

fn describe(p: &ConstraintParams) -> String {
    let rows: Vec<String> = (0..p.n_constraints())
        .map(|i| format!("{:?}", p.normal(i).as_slice()))
        .collect();
    format!("A = {:?}, B = [{}]", p.offsets().as_slice(), rows.join(", "))
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.as_slice())
}

pub fn check(args: &ProblemArgs) -> CliResult<()> {
    let p = params_of(args)?;
    match find_interior_point(&p, DEFAULT_FEAS_BUDGET) {
        Ok(cert) => print_json(&json!({
            "feasible": true,
            "interior_point": vec_json(&cert.interior_point),
            "max_margin": p.max_margin(&cert.interior_point)?,
        })),
        Err(err) if err.is_infeasible() => {
            print_json(&json!({ "feasible": false, "detail": err.to_string() }))?;
            Err(CliError::infeasible(format!("no strictly feasible input for {}", describe(&p))))
        }
        Err(err) => Err(err.into()),
    }
}

pub fn solve(args: &SolveArgs) -> CliResult<()> {
    let p = params_of(&args.problem)?;
    let result = match args.method {
        Method::Newton => match &args.warmstart_model {
            Some(path) => warmstart_solve(&MlpModel::load(&existing(path)?)?, &p, &SolverOptions::default()),
            None => newton(&p, &SolverOptions::default(), None),
        },
        Method::Flow => solve_gradient_flow(Objective::unscaled(&p), args.tol, None),
        Method::Sontag => sontag(&p),
    };
    let res = result.map_err(|err| {
        let infeasible = err.is_infeasible();
        let err = CliError::from(err);
        if infeasible {
            err.context(format!("infeasible system {}", describe(&p)))
        } else {
            err
        }
    })?;
    print_json(&json!({
        "k_star": vec_json(&res.k_star),
        "objective": res.objective,
        "grad_norm": res.grad_norm,
        "iterations": res.iterations,
        "status": format!("{:?}", res.status),
        "margins": vec_json(&p.margins(&res.k_star)?),
    }))?;
    match res.status {
        SolveStatus::Converged => Ok(()),
        status => Err(CliError::internal(format!("solver stopped with status {status:?}"))),
    }
}

fn sontag(p: &ConstraintParams) -> unisafe::Result<SolveResult> {
    if p.n_constraints() != 1 || p.input_dim() != 1 {
        return Err(unisafe::Error::Contract(format!(
            "the closed form needs N = m = 1, got N = {}, m = {}",
            p.n_constraints(),
            p.input_dim()
        )));
    }
    let k = DVector::from_element(1, closed_form_1d(p.offsets()[0], p.normals()[(0, 0)])?);
    let eval = Objective::unscaled(p).evaluate(&k, false)?;
    Ok(SolveResult {
        objective: eval.value,
        grad_norm: eval.gradient.norm(),
        k_star: k,
        iterations: 0,
        status: SolveStatus::Converged,
    })
}

fn example(which: ExampleArg, obstacle_seed: u64) -> CliResult<ControlProblem> {
    Ok(match which {
        ExampleArg::OneTwoD => make_example_1(Example1::TwoD, None, obstacle_seed)?,
        ExampleArg::OneTenD => make_example_1(Example1::TenD, None, obstacle_seed)?,
        ExampleArg::Two => make_example_2(),
    })
}

pub fn dataset(args: &DatasetArgs) -> CliResult<()> {
    let data = match args.example {
        None => sample_dataset(args.n, args.m, args.count, args.seed, args.label_tol)?,
        Some(which) => {
            let problem = example(which, args.obstacle_seed)?;
            sample_state_dataset(&problem, args.half_width, args.count, args.seed, args.label_tol)?
        }
    };
    data.save(&args.out)?;
    let meta = data.meta();
    print_json(&json!({
        "path": args.out.display().to_string(),
        "N": meta.n_constraints,
        "m": meta.m,
        "rows": data.len(),
        "features": data.feature_dim(),
        "seed": meta.seed,
        "label_tol": meta.label_tol,
    }))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(&existing(path)?)?)
}

fn check_dims(model: &MlpModel, data: &Dataset) -> CliResult<()> {
    if model.n_constraints() != data.n_constraints() || model.input_dim() != data.input_dim() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "model is for N = {}, m = {} but the dataset has N = {}, m = {}",
                model.n_constraints(),
                model.input_dim(),
                data.n_constraints(),
                data.input_dim()
            ),
        });
    }
    Ok(())
}

/// The architecture used for a fresh model of this size.
fn fresh_model(n: usize, m: usize, seed: u64) -> CliResult<MlpModel> {
    Ok(match (n, m) {
        (2, 2) => MlpModel::two_dimensional(seed),
        (10, 10) => MlpModel::ten_dimensional(seed),
        _ => MlpModel::new(n, m, &[64; 4], false, seed)?,
    })
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let data = load_dataset(&args.data)?;
    let mut model = match &args.init {
        Some(path) => MlpModel::load(&existing(path)?)?,
        None => fresh_model(data.n_constraints(), data.input_dim(), args.seed)?,
    };
    check_dims(&model, &data)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        freeze_all_but_last: args.freeze_last,
        validation_fraction: args.val_fraction,
        seed: args.seed,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let report = train_model(&mut model, &data, &config)?;
    model.save(&args.out)?;
    let history = args.history.clone().unwrap_or_else(|| sibling(&args.out, "history.csv"));
    let mut writer = csv::Writer::from_path(&history)?;
    for stats in &report.history {
        writer.serialize(stats)?;
    }
    writer.flush()?;
    let last = report.history.last().expect("at least one epoch");
    print_json(&json!({
        "model": args.out.display().to_string(),
        "history": history.display().to_string(),
        "epochs": report.history.len(),
        "train_rows": report.train_rows,
        "val_rows": report.val_rows,
        "final_train_mse": last.train_mse,
        "final_val_mse": last.val_mse,
    }))
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let model = MlpModel::load(&existing(&args.model)?)?;
    let data = load_dataset(&args.data)?;
    check_dims(&model, &data)?;
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(CliError::usage("--val-fraction must be in [0, 1)"));
    }
    let rows = if args.val_fraction == 0.0 {
        (0..data.len()).collect()
    } else {
        split_indices(data.len(), args.val_fraction, args.seed).1
    };
    if rows.is_empty() {
        return Err(CliError::usage("the validation split is empty"));
    }
    let (x, y) = data.columns(&rows);
    let mut out = json!({
        "rows": rows.len(),
        "validation_mse": mse(&model, &x, &y)?,
    });
    if args.hard {
        let mut satisfied = 0;
        for &i in &rows {
            let q = data.params(i)?;
            let k = project_onto_polytope(q.base(), &model.predict(&q)?, 0.0)?;
            if q.base().max_margin(&k)? <= HARD_MARGIN_TOL {
                satisfied += 1;
            }
        }
        out["hard_satisfaction_rate"] = json!(satisfied as f64 / rows.len() as f64);
    }
    print_json(&out)
}

fn default_x0(which: ExampleArg) -> Option<Vec<f64>> {
    match which {
        ExampleArg::OneTwoD => Some(vec![4.0, 4.0]),
        ExampleArg::Two => Some(vec![2.0, 1.0, PI + 0.1]),
        ExampleArg::OneTenD => None,
    }
}

/// Exit 65 if the model was trained for a different `N` or `m`.
fn check_model_fits(model: &MlpModel, problem: &ControlProblem, x: &DVector<f64>) -> CliResult<()> {
    let p = problem.constraints(x)?;
    if model.n_constraints() != p.n_constraints() || model.input_dim() != p.input_dim() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!(
                "model is for N = {}, m = {} but the example has N = {}, m = {}",
                model.n_constraints(),
                model.input_dim(),
                p.n_constraints(),
                p.input_dim()
            ),
        });
    }
    Ok(())
}

/// Exit 2 unless `x0` is safe and `u*(x0)` exists.
fn check_start(problem: &ControlProblem, x0: &DVector<f64>) -> CliResult<()> {
    let barriers: Vec<f64> = problem.barriers().iter().map(|h| h.value(x0)).collect();
    if barriers.iter().any(|h| !(*h > 0.0)) {
        return Err(CliError::infeasible(format!("x0 is not in the safe set: barrier values {barriers:?}")));
    }
    let p = problem.constraints(x0)?;
    if let Err(err) = find_interior_point(&p, DEFAULT_FEAS_BUDGET) {
        let margins = p.margins(&DVector::zeros(p.input_dim()))?;
        return Err(CliError::from(err).context(format!(
            "no admissible input at x0 (margins at u = 0: {:?})",
            margins.as_slice()
        )));
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let problem = example(args.example, args.obstacle_seed)?;
    let x0 = match (&args.x0, default_x0(args.example)) {
        (Some(text), _) => parse_list("--x0", text)?,
        (None, Some(x0)) => x0,
        (None, None) => return Err(CliError::usage("this example needs --x0")),
    };
    let x0 = DVector::from_vec(x0);
    if x0.len() != problem.system.state_dim() {
        return Err(CliError::usage(format!(
            "--x0 has {} entries, the example has {} states",
            x0.len(),
            problem.system.state_dim()
        )));
    }
    check_start(&problem, &x0)?;
    let mode = match args.mode {
        ModeArg::Continuous => Mode::Continuous,
        ModeArg::SampleAndHold => Mode::SampleAndHold,
    };
    let opts = SolverOptions::default();
    let model = match &args.model {
        Some(path) => Some(MlpModel::load(&existing(path)?)?),
        None => None,
    };
    if let Some(model) = &model {
        check_model_fits(model, &problem, &x0)?;
    }
    let need_model = |who: &str| model.clone().ok_or_else(|| CliError::usage(format!("{who} needs --model")));
    let sim: Simulation = if args.controller == ControllerArg::Interconnect {
        let u0 = u_star(&problem, &x0, &opts, None)?.k_star;
        simulate_interconnection(&problem, args.tau, &x0, &u0, args.t_final, args.dt)?
    } else {
        let mut controller: Box<dyn Controller> = match args.controller {
            ControllerArg::Ustar => Box::new(ExactController::new(problem.clone(), opts, Warmstart::Previous)),
            ControllerArg::Qp => Box::new(QpController::new(problem.clone())),
            ControllerArg::Nn => Box::new(NnController::new(need_model("nn")?, problem.clone(), false)),
            ControllerArg::NnHard => Box::new(NnController::new(need_model("nn-hard")?, problem.clone(), true)),
            ControllerArg::Warmstart => Box::new(WarmstartController::new(need_model("warmstart")?, problem.clone(), opts)),
            ControllerArg::Interconnect => unreachable!("handled above"),
        };
        run_simulation(&problem, controller.as_mut(), &x0, args.t_final, args.dt, mode)?
    };

    sim.trajectory.save(&args.out)?;
    let summary = metrics(&sim.trajectory, &problem);
    let metrics_path = sibling(&args.out, "metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&summary)?)?;
    let mut out = serde_json::to_value(&summary)?;
    out["trajectory"] = json!(args.out.display().to_string());
    out["metrics"] = json!(metrics_path.display().to_string());
    out["rows"] = json!(sim.trajectory.len());
    print_json(&out)?;
    match sim.failure {
        None => Ok(()),
        Some(failure) => Err(CliError::from(failure.error).context(format!(
            "simulation stopped at t = {} (x = {:?})",
            failure.time,
            failure.state.as_slice()
        ))),
    }
}

fn bench_controller(
    kind: BenchControllerArg,
    problem: &ControlProblem,
    model: Option<&MlpModel>,
) -> CliResult<BenchController> {
    let problem = problem.clone();
    let opts = SolverOptions::default();
    let need_model = |name: &str| model.cloned().ok_or_else(|| CliError::usage(format!("controller {name} needs --model")));
    Ok(match kind {
        BenchControllerArg::Ustar => {
            BenchController::new("ustar", move || ExactController::new(problem.clone(), opts, Warmstart::Cold))
        }
        BenchControllerArg::UstarPrev => {
            BenchController::new("ustar-prev", move || ExactController::new(problem.clone(), opts, Warmstart::Previous))
        }
        BenchControllerArg::Qp => BenchController::new("qp", move || QpController::new(problem.clone())),
        BenchControllerArg::Nn => {
            let model = need_model("nn")?;
            BenchController::new("nn", move || NnController::new(model.clone(), problem.clone(), false))
        }
        BenchControllerArg::NnHard => {
            let model = need_model("nn-hard")?;
            BenchController::new("nn-hard", move || NnController::new(model.clone(), problem.clone(), true))
        }
        BenchControllerArg::Warmstart => {
            let model = need_model("warmstart")?;
            BenchController::new("warmstart", move || WarmstartController::new(model.clone(), problem.clone(), opts))
        }
    })
}

pub fn bench(args: &BenchArgs) -> CliResult<()> {
    let problem = example(args.example, args.obstacle_seed)?;
    let model = match &args.model {
        Some(path) => Some(MlpModel::load(&existing(path)?)?),
        None => None,
    };
    if let Some(model) = &model {
        check_model_fits(model, &problem, &DVector::from_element(problem.system.state_dim(), 1.0))?;
    }
    let mut controllers = Vec::new();
    for kind in &args.controllers {
        controllers.push(bench_controller(*kind, &problem, model.as_ref())?);
    }
    let config = BenchConfig {
        samples: args.samples,
        seed: args.seed,
        half_width: if args.example == ExampleArg::OneTwoD { 5.0 } else { 3.0 },
        t_final: args.t_final,
        dt: args.dt,
        ..BenchConfig::default()
    };
    let report = run_bench(&problem, &controllers, &config)?;
    println!("{report}");
    if let Some(path) = &args.out {
        report.write_csv(File::create(path)?)?;
    }
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> CliResult<()> {
    let path = existing(&args.path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let model = MlpModel::load(&path)?;
        let widths: Vec<usize> = model.layers().iter().map(|l| l.out_width()).collect();
        let residual: Vec<bool> = model.layers().iter().map(|l| l.residual).collect();
        return print_json(&json!({
            "kind": "model",
            "N": model.n_constraints(),
            "m": model.input_dim(),
            "input_width": model.feature_dim(),
            "layer_widths": widths,
            "residual_flags": residual,
            "parameters": model.parameter_count(),
        }));
    }
    let mut header = String::new();
    BufReader::new(File::open(&path)?).read_line(&mut header)?;
    if header.starts_with("q_0") {
        let data = Dataset::load(&path)?;
        let mut worst_grad: f64 = 0.0;
        for (i, label) in data.labels().iter().enumerate() {
            let q = data.params(i)?;
            let k = DVector::from_column_slice(label);
            worst_grad = worst_grad.max(Objective::scaled(&q).gradient(&k)?.norm());
        }
        let meta = data.meta();
        print_json(&json!({
            "kind": "dataset",
            "N": meta.n_constraints,
            "m": meta.m,
            "rows": data.len(),
            "seed": meta.seed,
            "label_tol": meta.label_tol,
            "max_label_grad_norm": worst_grad,
        }))
    } else if header.starts_with("t,") {
        let trajectory = Trajectory::load(&path)?;
        let end = trajectory.final_state();
        print_json(&json!({
            "kind": "trajectory",
            "rows": trajectory.len(),
            "state_dim": end.map_or(0, |x| x.len()),
            "t_final": trajectory.times.last(),
            "final_norm": end.map(|x| x.norm()),
            "halted": trajectory.halted,
            "min_barrier": trajectory.min_barrier.iter().copied().fold(f64::INFINITY, f64::min),
        }))
    } else {
        Err(CliError {
            code: EXIT_DATA,
            message: format!("{}: not a dataset, model or trajectory file", path.display()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unisafe::params::scale_params;

    #[test]
    fn sontag_needs_a_scalar_problem() {
        let p = ConstraintParams::from_rows(&[-1.0, -1.0], &[vec![1.0], vec![-1.0]]).unwrap();
        assert!(matches!(sontag(&p), Err(unisafe::Error::Contract(_))));
        let p = ConstraintParams::from_rows(&[-1.0], &[vec![1.0]]).unwrap();
        assert!((sontag(&p).unwrap().k_star[0] - (1.0 - 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn fresh_models_follow_the_reference_architectures() {
        assert_eq!(fresh_model(2, 2, 0).unwrap().feature_dim(), 7);
        assert_eq!(fresh_model(10, 10, 0).unwrap().feature_dim(), 111);
        assert_eq!(fresh_model(3, 1, 0).unwrap().layers().len(), 5);
    }

    #[test]
    fn unsafe_start_is_infeasible() {
        let problem = example(ExampleArg::OneTwoD, 0).unwrap();
        let err = check_start(&problem, &DVector::from_vec(vec![0.0, 2.5])).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(check_start(&problem, &DVector::from_vec(vec![4.0, 4.0])).is_ok());
    }

    #[test]
    fn scaled_and_unscaled_solves_agree() {
        // the warmstart path runs on q(p)
        let p = ConstraintParams::from_rows(&[30.0, -2.0], &[vec![-10.0, 2.0], vec![4.0, 1.0]]).unwrap();
        let (q, _) = scale_params(&p);
        let direct = newton(&p, &SolverOptions::default(), None).unwrap();
        let scaled = unisafe::solver::solve_scaled(&q, &SolverOptions::default(), None).unwrap();
        assert!((direct.k_star - scaled.k_star).norm() < 1e-8);
    }
}
