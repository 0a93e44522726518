use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use mvsteady::analysis::{
    annotate_steady_states, estimate_order_parameters, kirkwood_monroe_residual, self_consistency_map,
    NodalModel,
};
use mvsteady::control::{mpc_loop, MpcConfig, OcpConfig};
use mvsteady::deflation::{find_all_steady_states, DeflationConfig, NewtonConfig};
use mvsteady::dynamics::{integrate_forward, l2_distance, rk4_step, step_count, Trajectory, BLOW_UP_NORM};

use crate::config::RunConfig;
use crate::output::{fmt_f64, indexed_header, write_density, write_json, Csv, SCHEMA_VERSION};
use crate::problem::{count_peaks, CliError, CliResult, Problem, RootRecord, RunRecord, SteadyStatesFile};

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_report(dir: &Path, text: &str) -> CliResult<()> {
    fs::write(dir.join("report.txt"), text)?;
    print!("{text}");
    Ok(())
}

fn mass_quadratic(m: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
    u.column_iter().map(|c| c.dot(&(m * c))).sum()
}

pub fn steady_states(cfg: &RunConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let d = &cfg.discretization;
    let base = Problem::build(cfg, d.beta_inv, 1)?;
    let dcfg = DeflationConfig {
        power: cfg.deflation.power,
        shift: cfg.deflation.shift,
        max_roots: cfg.deflation.max_roots,
        ..Default::default()
    };
    let ncfg = NewtonConfig {
        step_tol: cfg.newton.step_tol,
        max_iter: cfg.newton.max_iter,
        rcond: cfg.newton.rcond,
    };
    let nodal = NodalModel::new(&base.model, &base.basis, &base.quad)?;
    let mut report = format!(
        "steady states: model {} ({} modes, {} quadrature nodes)\n",
        base.model.id(),
        base.basis.len(),
        base.quad.len()
    );
    let mut runs = Vec::new();
    let mut next_index = 0;
    for &beta_inv in std::iter::once(&d.beta_inv).chain(&d.sweep) {
        let p = Problem {
            ops: base.ops.with_beta_inv(beta_inv),
            model: base.model.clone(),
            basis: base.basis.clone(),
            quad: base.quad.clone(),
        };
        let a0 = p.initial_guess(&cfg.deflation.initial_guess, cfg.deflation.seed, dir)?;
        let mut set = find_all_steady_states(&p.ops, &p.basis, &a0, &dcfg, &ncfg, &cfg.filter)?;
        annotate_steady_states(&mut set, &p.model, &p.ops, &p.basis, &p.quad, &cfg.stability)?;
        let first = next_index;
        let mut roots = Vec::new();
        for e in &set.entries {
            let a = e.coefficients();
            let (grid, values) = p.density_grid(cfg, &a)?;
            let density_file = write_density(dir, next_index, cfg, p.domain(), &grid, &values)?;
            let n = cfg.grid_points(p.domain().dim());
            roots.push(RootRecord {
                index: next_index,
                coefficients: e.coeffs.clone(),
                residual_norm: e.residual_norm,
                kirkwood_monroe_residual: kirkwood_monroe_residual(&a, &nodal, beta_inv).ok(),
                free_energy: e.free_energy,
                stability: e.stability,
                order_parameters: e.order_params,
                min_density: e.min_density,
                positive: e.positive,
                translation_of: e.translation_of.map(|i| first + i),
                newton_iterations: e.newton_iterations,
                peaks: count_peaks(&values, n, p.domain().dim()),
                density_file,
            });
            next_index += 1;
        }
        writeln!(
            report,
            "\nbeta_inv = {beta_inv}: {} roots, {} positive, stopped by {:?}",
            roots.len(),
            set.positive_count(),
            set.termination
        )
        .unwrap();
        writeln!(
            report,
            "  {:>5} {:>10} {:>10} {:>22} {:>9} {:>6} {:>5}  order parameter",
            "index", "||F||", "KM", "free energy", "stability", "min>0", "peaks"
        )
        .unwrap();
        for r in &roots {
            let tag = r.translation_of.map(|i| format!(" (translate of {i})")).unwrap_or_default();
            let m = r
                .order_parameters
                .map(|o| format!("m = ({:.6}, {:.6})", o.m1, o.m2))
                .unwrap_or_default();
            writeln!(
                report,
                "  {:>5} {:>10.2e} {:>10.2e} {:>22} {:>9} {:>6} {:>5}  {m}{tag}",
                r.index,
                r.residual_norm,
                r.kirkwood_monroe_residual.unwrap_or(f64::NAN),
                r.free_energy.map(fmt_f64).unwrap_or_else(|| "-".into()),
                format!("{:?}", r.stability).to_lowercase(),
                r.positive,
                r.peaks
            )
            .unwrap();
        }
        runs.push(RunRecord {
            beta_inv,
            termination: set.termination,
            roots,
        });
    }
    let file = SteadyStatesFile {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        runs,
    };
    write_json(&dir.join("steadystates.json"), &file)?;
    write_report(dir, &report)?;
    let positive = file.runs.iter().flat_map(|r| &r.roots).filter(|r| r.positive).count();
    if positive == 0 {
        return Err(CliError::NoRoots("no positive steady state found".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyRow {
    run: usize,
    index: usize,
    beta_inv: f64,
    residual_norm: f64,
    kirkwood_monroe_residual: f64,
    order_gap: Option<f64>,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyFile<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    source_config: &'a RunConfig,
    quadrature_points: usize,
    rows: Vec<VerifyRow>,
}

/// Re-checks every positive root of a `steady-states` run on a refined
/// quadrature. The physics comes from the config embedded in that file.
pub fn verify(cfg: &RunConfig) -> CliResult<()> {
    let dir = out_dir(cfg)?;
    let input = cfg
        .verify
        .input
        .clone()
        .unwrap_or_else(|| dir.join("steadystates.json"));
    let states = SteadyStatesFile::read(&input)?;
    let src = &states.config;
    let v = &cfg.verify;
    let fine = Problem::build(src, src.discretization.beta_inv, v.refine)?;
    let hkb = fine.model.hkb_params().copied();
    let mut rows = Vec::new();
    let mut report = format!(
        "verify {}: {} quadrature nodes ({}x refinement)\n  {:>3} {:>5} {:>10} {:>10} {:>10}  result\n",
        input.display(),
        fine.quad.len(),
        v.refine,
        "run",
        "index",
        "||F||",
        "KM",
        "|m-R(m)|"
    );
    for (ri, run) in states.runs.iter().enumerate() {
        let ops = fine.ops.with_beta_inv(run.beta_inv);
        let nodal = NodalModel::new(&fine.model, &fine.basis, &fine.quad)?;
        for root in run.roots.iter().filter(|r| r.positive) {
            if root.coefficients.len() != fine.basis.len() {
                return Err(CliError::Input(format!(
                    "{}: root {} has {} coefficients, expected {}",
                    input.display(),
                    root.index,
                    root.coefficients.len(),
                    fine.basis.len()
                )));
            }
            let a = DVector::from_vec(root.coefficients.clone());
            let residual_norm = ops.residual(&a)?.norm();
            let km = kirkwood_monroe_residual(&a, &nodal, run.beta_inv).unwrap_or(f64::INFINITY);
            let order_gap = match &hkb {
                Some(p) => {
                    let m = estimate_order_parameters(&a, &fine.basis, p, run.beta_inv)?;
                    let r = self_consistency_map([m.m1, m.m2], p, run.beta_inv, &fine.quad);
                    Some((m.m1 - r[0]).hypot(m.m2 - r[1]))
                }
                None => None,
            };
            let pass = residual_norm <= v.residual_tol
                && km <= v.kirkwood_monroe_tol
                && order_gap.is_none_or(|g| g <= v.order_tol);
            writeln!(
                report,
                "  {ri:>3} {:>5} {residual_norm:>10.2e} {km:>10.2e} {:>10}  {}",
                root.index,
                order_gap.map(|g| format!("{g:.2e}")).unwrap_or_else(|| "-".into()),
                if pass { "pass" } else { "FAIL" }
            )
            .unwrap();
            rows.push(VerifyRow {
                run: ri,
                index: root.index,
                beta_inv: run.beta_inv,
                residual_norm,
                kirkwood_monroe_residual: km,
                order_gap,
                pass,
            });
        }
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    writeln!(report, "{} of {} roots pass", rows.len() - failed, rows.len()).unwrap();
    write_json(
        &dir.join("verify.json"),
        &VerifyFile {
            schema_version: SCHEMA_VERSION,
            config: cfg,
            source_config: src,
            quadrature_points: fine.quad.len(),
            rows,
        },
    )?;
    write_report(dir, &report)?;
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} roots failed verification")));
    }
    Ok(())
}

/// Free evolution. On blow-up the outputs up to the last good state are kept.
pub fn evolve(cfg: &RunConfig) -> CliResult<()> {
    let e = cfg
        .evolve
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [evolve] section".into()))?;
    let dir = out_dir(cfg)?;
    let p = Problem::build(cfg, cfg.discretization.beta_inv, 1)?;
    let reference = e.reference.as_ref().map(|s| p.resolve_target(s, dir)).transpose()?;
    let mut a = p.coefficients(&e.start, dir)?;
    let n = step_count(e.span, e.dt);
    let h = e.span / n as f64;
    let l = p.basis.len();
    let mut header: Vec<String> = vec!["t".into(), "mass".into(), "distance".into()];
    header.extend(indexed_header("a", l));
    let mut csv = Csv::create(&dir.join("trajectory.csv"), cfg, &header)?;
    let distance = |a: &DVector<f64>| reference.as_ref().map_or(f64::NAN, |r| l2_distance(&p.ops, a, r));
    let mut snapshots = 0;
    let mut failure = None;
    let mut k = 0;
    loop {
        let t = k as f64 * h;
        csv.row([t, p.ops.integrals.dot(&a), distance(&a)].into_iter().chain(a.iter().copied()))?;
        if k % e.snapshot_stride == 0 || k == n {
            let (grid, values) = p.density_grid(cfg, &a)?;
            write_density(dir, snapshots, cfg, p.domain(), &grid, &values)?;
            snapshots += 1;
        }
        if k == n {
            break;
        }
        let next = rk4_step(&p.ops, &a, None, h);
        let norm = next.norm();
        if !(norm <= BLOW_UP_NORM) {
            failure = Some(format!("state blew up at t = {:.6} (norm {norm:.3e})", t + h));
            if k % e.snapshot_stride != 0 {
                let (grid, values) = p.density_grid(cfg, &a)?;
                write_density(dir, snapshots, cfg, p.domain(), &grid, &values)?;
                snapshots += 1;
            }
            break;
        }
        a = next;
        k += 1;
    }
    csv.finish()?;
    let mut report = format!(
        "evolve: model {}, {} steps of {h} up to t = {}\n  final mass {}\n  {snapshots} density snapshots\n",
        p.model.id(),
        k,
        k as f64 * h,
        fmt_f64(p.ops.integrals.dot(&a)),
    );
    if reference.is_some() {
        writeln!(report, "  distance to reference at the end {}", fmt_f64(distance(&a))).unwrap();
    }
    if let Some(f) = &failure {
        writeln!(report, "  {f}").unwrap();
    }
    write_report(dir, &report)?;
    match failure {
        Some(f) => Err(CliError::Numerical(f)),
        None => Ok(()),
    }
}

/// Receding-horizon stabilisation of a target steady state, next to the
/// uncontrolled run from the same start.
pub fn stabilize(cfg: &RunConfig) -> CliResult<()> {
    let c = cfg
        .control
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [control] section".into()))?;
    let dir = out_dir(cfg)?;
    let p = Problem::build(cfg, cfg.discretization.beta_inv, 1)?;
    let target = p.resolve_target(&c.target, dir)?;
    let a0 = p.coefficients(&c.start, dir)?;
    let ocp = OcpConfig {
        horizon: c.window,
        gamma: c.gamma,
        terminal_weight: c.terminal_weight,
        step_size: c.step_size,
        tol: c.tol,
        max_iter: c.max_iter,
        dt: c.dt,
        max_halvings: c.max_halvings,
        step_rule: c.step_rule,
        smoothing: c.smoothing,
    };
    let mpc = MpcConfig {
        window: c.window,
        n_steps: c.n_steps,
        span: c.span,
    };
    let res = mpc_loop(&a0, &target, &mpc, &ocp, &p.ops)?;
    let free: Option<Trajectory> = match integrate_forward(&a0, None, (0.0, c.span), c.dt, &p.ops) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("uncontrolled reference run failed: {e}");
            None
        }
    };
    let free_at = |t: f64| -> f64 {
        free.as_ref().map_or(f64::NAN, |tr| {
            let h = tr.times[1] - tr.times[0];
            let k = ((t / h).round() as usize).min(tr.states.len() - 1);
            l2_distance(&p.ops, &tr.states[k], &target)
        })
    };

    let l = p.basis.len();
    let mut header: Vec<String> = [
        "t",
        "distance",
        "distance_uncontrolled",
        "mass",
        "control_norm",
        "open_loop_cost",
        "open_loop_iterations",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(indexed_header("a", l));
    let mut traj = Csv::create(&dir.join("trajectory.csv"), cfg, &header)?;
    let mut ctrl_header: Vec<String> = vec!["t_start".into(), "t_end".into(), "axis".into()];
    ctrl_header.extend(indexed_header("u", l));
    let mut ctrl = Csv::create(&dir.join("controls.csv"), cfg, &ctrl_header)?;
    let mut snapshots = 0;
    for (h, (t, a)) in res.times.iter().zip(&res.states).enumerate() {
        let applied = res.applied.get(h);
        traj.row(
            [
                *t,
                l2_distance(&p.ops, a, &target),
                free_at(*t),
                p.ops.integrals.dot(a),
                applied.map_or(f64::NAN, |u| mass_quadratic(&p.ops.mass, u).sqrt()),
                res.open_loop_costs.get(h).copied().unwrap_or(f64::NAN),
                res.open_loop_iterations.get(h).map_or(f64::NAN, |&i| i as f64),
            ]
            .into_iter()
            .chain(a.iter().copied()),
        )?;
        if let Some(u) = applied {
            for (j, col) in u.column_iter().enumerate() {
                ctrl.row([*t, res.times[h + 1], j as f64].into_iter().chain(col.iter().copied()))?;
            }
        }
        if h % c.snapshot_stride == 0 || h == c.n_steps {
            let (grid, values) = p.density_grid(cfg, a)?;
            write_density(dir, snapshots, cfg, p.domain(), &grid, &values)?;
            snapshots += 1;
        }
    }
    traj.finish()?;
    ctrl.finish()?;

    let d0 = l2_distance(&p.ops, &a0, &target);
    let dn = l2_distance(&p.ops, res.states.last().unwrap(), &target);
    let free_final = free_at(c.span);
    let unconverged = res.open_loop_converged.iter().filter(|c| !**c).count();
    let energy: f64 = res
        .applied
        .iter()
        .map(|u| mass_quadratic(&p.ops.mass, u) * mpc.sampling())
        .sum();
    let report = format!(
        "stabilize: model {}, {} feedback updates every {} (window {})\n  \
         distance to target: initial {}, final {}, uncontrolled final {}\n  \
         final / initial {}, final / uncontrolled {}\n  control energy {}\n  \
         open-loop solves at the iteration limit: {unconverged} of {}\n  max mass drift {}\n",
        p.model.id(),
        c.n_steps,
        mpc.sampling(),
        c.window,
        fmt_f64(d0),
        fmt_f64(dn),
        fmt_f64(free_final),
        fmt_f64(dn / d0),
        fmt_f64(dn / free_final),
        fmt_f64(energy),
        c.n_steps,
        fmt_f64(
            res.states
                .iter()
                .map(|a| (p.ops.integrals.dot(a) - p.ops.integrals.dot(&a0)).abs())
                .fold(0.0, f64::max)
        ),
    );
    write_report(dir, &report)
}
