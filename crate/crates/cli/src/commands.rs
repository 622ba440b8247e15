//! One function per subcommand; each writes its files and returns their paths.

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use elastodyn::deriv::{gradient_check, taylor_order};
use elastodyn::dtn::{alessandrini_gap, ForwardModel};
use elastodyn::fem::FemSpace;
use elastodyn::invert::{landweber, stability_consistency, synthesize_data, InversionConfig, InversionReport, StepRule};
use elastodyn::material::{project_onto_k, ConstraintSet, ParamVector, PriorData};
use elastodyn::mesh::{validate_partition, PartitionedMesh};
use elastodyn::probes::{greens_blowup_probe, lipschitz_probe, modulus_comparison, q0_probe, sample_compact};
use elastodyn::solver::{admissible_frequency_bound, check_frequency, smallest_dirichlet_eigenvalue, EigenReport};
use elastodyn::Error;

use crate::config::{ExperimentConfig, StepKind};
use crate::output::OutputDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Probe {
    Lipschitz,
    Q0,
    Greens,
    Taylor,
    Alessandrini,
}

impl Probe {
    pub fn name(self) -> &'static str {
        match self {
            Probe::Lipschitz => "lipschitz",
            Probe::Q0 => "q0",
            Probe::Greens => "greens",
            Probe::Taylor => "taylor",
            Probe::Alessandrini => "alessandrini",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Core(Error),
    Io(std::io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(Error::Io(_)) | CliError::Io(_) => 1,
            CliError::Core(_) => 2,
        }
    }

    pub fn to_json(&self, command: &str) -> serde_json::Value {
        let kind = match self.exit_code() {
            2 => "config",
            3 => "numerical",
            _ => "io",
        };
        let (messages, report) = match self {
            CliError::Config(v) => (v.clone(), serde_json::Value::Null),
            CliError::Io(e) => (vec![e.to_string()], serde_json::Value::Null),
            CliError::Core(e) => {
                let report = match e {
                    Error::Solver { iterations, residual, history } => {
                        json!({ "iterations": iterations, "relative_residual": residual, "history": history })
                    }
                    Error::Stagnation { iteration, reason } => json!({ "iteration": iteration, "reason": reason }),
                    Error::Resolution { r_min, h_max, required_h_max } => {
                        json!({ "r_min": r_min, "h_max": h_max, "required_h_max": required_h_max })
                    }
                    Error::FrequencyRange { omega_sq, bound } => json!({ "omega_sq": omega_sq, "bound": bound }),
                    _ => serde_json::Value::Null,
                };
                let messages = match e {
                    Error::Validation(v) => v.clone(),
                    other => vec![other.to_string()],
                };
                (messages, report)
            }
        };
        json!({
            "tool": "elastodyn",
            "version": crate::output::VERSION,
            "command": command,
            "status": "error",
            "kind": kind,
            "messages": messages,
            "report": report,
        })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Mesh, finite element space and prior shared by most commands.
pub struct Setup {
    pub mesh_id: String,
    pub space: Arc<FemSpace>,
    pub prior: PriorData,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> CliResult<Self> {
        let mesh = cfg.build_mesh()?;
        Self::from_mesh(cfg, mesh)
    }

    fn from_mesh(cfg: &ExperimentConfig, mesh: PartitionedMesh) -> CliResult<Self> {
        let n_sub = mesh.n_regions();
        let prior = cfg.prior_data(n_sub)?;
        let space = FemSpace::new(mesh)?;
        Ok(Self { mesh_id: space.mesh_id.clone(), space, prior })
    }

    fn truth(&self, cfg: &ExperimentConfig) -> CliResult<ParamVector> {
        let truth = cfg.truth().ok_or_else(|| CliError::Config(vec!["material: section required by this command".into()]))??;
        if truth.n_sub() != self.prior.n_sub {
            return Err(CliError::Config(vec![format!(
                "material.lambda: the mesh has {} subdomains, got {} entries",
                self.prior.n_sub,
                truth.n_sub()
            )]));
        }
        if !ConstraintSet::compact(self.prior).contains(&truth) {
            return Err(CliError::Config(vec!["material: not in the compact admissible set of the prior".into()]));
        }
        Ok(truth)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrequencyInfo {
    pub lambda1_0: f64,
    pub omega_max: f64,
    pub omega: f64,
    pub eigen: EigenReport,
}

/// Smallest reference eigenvalue, the admissible bound and the chosen `ω`.
pub fn frequency(cfg: &ExperimentConfig, setup: &Setup) -> CliResult<FrequencyInfo> {
    let eigen = smallest_dirichlet_eigenvalue(&setup.space, setup.prior.reference_tensor(), cfg.run.eig_tol)?;
    let omega_max = admissible_frequency_bound(&setup.prior, eigen.value)?;
    let omega = match (cfg.frequency.omega, cfg.frequency.fraction) {
        (Some(w), _) => w,
        (None, f) => f.unwrap_or(0.7) * omega_max,
    };
    check_frequency(&setup.prior, eigen.value, omega)?;
    Ok(FrequencyInfo { lambda1_0: eigen.value, omega_max, omega, eigen })
}

pub fn cmd_mesh(cfg: &ExperimentConfig, out: &OutputDir) -> CliResult<Vec<PathBuf>> {
    let mesh = cfg.build_mesh()?;
    let prior = cfg.prior_data(mesh.n_regions())?;
    let quality = validate_partition(&mesh, &prior);
    let mut files = vec![out.write_raw("mesh.emesh", mesh.to_emesh_string().as_bytes())?];
    let summary = json!({
        "mesh_id": mesh.content_hash(),
        "vertices": mesh.vertices.len(),
        "tets": mesh.tets.len(),
        "boundary_faces": mesh.boundary_faces.len(),
        "sigma_faces": mesh.sigma_faces().count(),
        "quality": quality.as_ref().ok(),
        "violations": quality.as_ref().err(),
    });
    files.push(out.write_json("mesh.json", &summary)?);
    match quality {
        Ok(_) => Ok(files),
        Err(v) => Err(CliError::Core(Error::Validation(v))),
    }
}

pub fn cmd_eig(cfg: &ExperimentConfig, out: &OutputDir) -> CliResult<Vec<PathBuf>> {
    let setup = Setup::new(cfg)?;
    let info = frequency(cfg, &setup)?;
    let c0 = setup.prior.reference_tensor();
    let result = json!({
        "mesh_id": setup.mesh_id,
        "reference_tensor": { "lambda": c0.lambda, "mu": c0.mu },
        "lambda1_0": info.lambda1_0,
        "omega_max": info.omega_max,
        "omega": info.omega,
        "eigen": info.eigen,
        "h_max": setup.space.h_max,
    });
    Ok(vec![out.write_json("eig.json", &result)?])
}

pub fn cmd_forward(cfg: &ExperimentConfig, out: &OutputDir) -> CliResult<Vec<PathBuf>> {
    let setup = Setup::new(cfg)?;
    let truth = setup.truth(cfg)?;
    let info = frequency(cfg, &setup)?;
    let model = ForwardModel::new(setup.space.clone())?;
    let dtn = model.forward(&truth, info.omega, cfg.run.tol)?;
    let result = json!({
        "frequency": info,
        "star_norm": model.star_norm(&dtn.entries)?,
        "dtn": dtn.to_json(),
    });
    Ok(vec![out.write_json("dtn.json", &result)?])
}

fn inversion_config(cfg: &ExperimentConfig, truth: &ParamVector, k: &ConstraintSet, omega_max: f64) -> CliResult<InversionConfig> {
    let inv = &cfg.inversion;
    let initial = match &inv.initial {
        Some(v) => ParamVector::new(v.clone())?,
        None => project_onto_k(&truth.scale(1.0 + inv.perturbation), k)?,
    };
    Ok(InversionConfig {
        mode: inv.mode,
        step_rule: match inv.step_rule {
            StepKind::Fixed => StepRule::Fixed { step: inv.step.unwrap_or(1.0) },
            StepKind::Backtracking => StepRule::Backtracking,
        },
        direction: inv.direction,
        max_iterations: inv.max_iterations,
        tau: inv.tau,
        noise_level: inv.noise,
        initial: Some(initial),
        min_omega_fraction: inv.min_omega_fraction,
        omega_max: Some(omega_max),
        ..InversionConfig::default()
    })
}

pub fn cmd_invert(cfg: &ExperimentConfig, out: &OutputDir) -> CliResult<Vec<PathBuf>> {
    let setup = Setup::new(cfg)?;
    let truth = setup.truth(cfg)?;
    let info = frequency(cfg, &setup)?;
    let k = ConstraintSet::compact(setup.prior);
    let run = inversion_config(cfg, &truth, &k, info.omega_max)?;
    let model = ForwardModel::new(setup.space.clone())?;
    let (tol, seed) = (cfg.run.tol, cfg.run.seed);
    let data = synthesize_data(&model, &truth, info.omega, cfg.inversion.noise, seed, tol)?;
    let (estimate, trace) = landweber(&model, &data, &k, &run, info.omega, tol)?;
    let report = InversionReport::new(run.mode, info.omega, &estimate, &trace, Some(&truth));
    let mut files = vec![
        out.write_json("inversion.json", &json!({ "mesh_id": setup.mesh_id, "frequency": info, "report": report }))?,
        out.write_csv("trace.csv", &trace.to_csv())?,
    ];
    if !cfg.inversion.stability_noise.is_empty() {
        let table = stability_consistency(&model, &k, &truth, &run, info.omega, &cfg.inversion.stability_noise, None, seed, tol)?;
        let mut csv = String::from("noise,error,iterations,stop\n");
        for r in &table.rows {
            csv.push_str(&format!("{:e},{:e},{},{:?}\n", r.noise, r.error, r.iterations, r.stop));
        }
        files.push(out.write_json("stability.json", &table)?);
        files.push(out.write_csv("stability.csv", &csv)?);
    }
    Ok(files)
}

pub fn cmd_probe(cfg: &ExperimentConfig, probe: Probe, out: &OutputDir) -> CliResult<Vec<PathBuf>> {
    let setup = Setup::new(cfg)?;
    let k = ConstraintSet::compact(setup.prior);
    let (tol, seed) = (cfg.run.tol, cfg.run.seed);
    let pc = &cfg.probe;
    let model = ForwardModel::new(setup.space.clone())?;
    match probe {
        Probe::Lipschitz => {
            let info = frequency(cfg, &setup)?;
            let report = lipschitz_probe(&model, &k, info.omega, pc.samples, seed, tol)?;
            let modulus = modulus_comparison(&report, setup.prior.n_sub, pc.delta, pc.c_star)?;
            let csv = report.to_csv();
            Ok(vec![
                out.write_json("probe_lipschitz.json", &json!({ "frequency": info, "report": report, "modulus": modulus }))?,
                out.write_csv("probe_lipschitz.csv", &csv)?,
            ])
        }
        Probe::Q0 => {
            let info = frequency(cfg, &setup)?;
            let report = q0_probe(&model, &k, info.omega, pc.mode, pc.l_samples, pc.h_samples, seed, tol)?;
            let csv = report.to_csv();
            Ok(vec![
                out.write_json("probe_q0.json", &json!({ "frequency": info, "report": report }))?,
                out.write_csv("probe_q0.csv", &csv)?,
            ])
        }
        Probe::Greens => {
            let truth = setup.truth(cfg)?;
            let info = frequency(cfg, &setup)?;
            let family = pc
                .greens_cells
                .iter()
                .map(|&n| Ok(FemSpace::new(cfg.build_cube(n)?)?))
                .collect::<CliResult<Vec<_>>>()?;
            let report = greens_blowup_probe(&family, &truth, info.omega, pc.y, &pc.r_list, tol)?;
            let csv = report.to_csv();
            Ok(vec![
                out.write_json("probe_greens.json", &json!({ "frequency": info, "report": report }))?,
                out.write_csv("probe_greens.csv", &csv)?,
            ])
        }
        Probe::Taylor => {
            let truth = setup.truth(cfg)?;
            let info = frequency(cfg, &setup)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // relative direction so every coordinate stays admissible for t ≤ 0.1
            let h: Vec<f64> = truth.as_slice().iter().map(|&x| x * rng.random_range(-1.0..1.0)).collect();
            let h = ParamVector::new(h)?;
            let h = h.scale(1.0 / h.max_abs());
            let open = ConstraintSet::open(setup.prior);
            let taylor = taylor_order(&model, &open, &truth, &h, info.omega, &pc.t_list, tol)?;
            let data = model.forward(&truth, info.omega, tol)?.entries.clone();
            let l = project_onto_k(&truth.scale(1.1), &k)?;
            let grad = gradient_check(&model, &l, &data, info.omega, 1e-4, tol)?;
            let mut csv = String::from("t,remainder\n");
            for (t, r) in taylor.t.iter().zip(&taylor.remainder) {
                csv.push_str(&format!("{t:e},{r:e}\n"));
            }
            let worst = grad.iter().map(|g| g.relative_error).fold(0.0, f64::max);
            Ok(vec![
                out.write_json(
                    "probe_taylor.json",
                    &json!({
                        "frequency": info,
                        "mesh_id": setup.mesh_id,
                        "base": truth.as_slice(),
                        "direction": h.as_slice(),
                        "taylor": taylor,
                        "gradient_point": l.as_slice(),
                        "gradient_check": grad,
                        "gradient_max_relative_error": worst,
                    }),
                )?,
                out.write_csv("probe_taylor.csv", &csv)?,
            ])
        }
        Probe::Alessandrini => {
            let info = frequency(cfg, &setup)?;
            let n_sub = setup.prior.n_sub;
            let n_t = setup.space.dofs.n_trace();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            let mut csv = String::from("pair,lhs,rhs,gap\n");
            for i in 0..pc.pairs {
                let l1 = sample_compact(&k, n_sub, &mut rng);
                let l2 = sample_compact(&k, n_sub, &mut rng);
                let psi: Vec<f64> = (0..n_t).map(|_| rng.random_range(-1.0..1.0)).collect();
                let phi: Vec<f64> = (0..n_t).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = alessandrini_gap(&model, &l1, &l2, info.omega, &psi, &phi, tol)?;
                csv.push_str(&format!("{i},{:e},{:e},{:e}\n", g.lhs, g.rhs, g.gap));
                rows.push(g);
            }
            let worst = rows.iter().map(|g| g.gap).fold(0.0, f64::max);
            Ok(vec![
                out.write_json(
                    "probe_alessandrini.json",
                    &json!({ "frequency": info, "mesh_id": setup.mesh_id, "pairs": rows, "max_gap": worst }),
                )?,
                out.write_csv("probe_alessandrini.csv", &csv)?,
            ])
        }
    }
}
