//! Experiment configuration: a TOML file with one table per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use elastodyn::invert::{Direction, Mode};
use elastodyn::material::{ConstraintSet, ParamVector, PriorData};
use elastodyn::mesh::{build_block_mesh, checkerboard_blocks, load_mesh, two_layer_blocks, Block, BoxFace, PartitionedMesh, SigmaSelector};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    pub prior: PriorSection,
    #[serde(default)]
    pub mesh: MeshSection,
    #[serde(default)]
    pub material: Option<MaterialSection>,
    #[serde(default)]
    pub frequency: FrequencySection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker threads; hardware concurrency when absent.
    pub threads: Option<usize>,
    /// Relative residual tolerance of the linear solves.
    pub tol: f64,
    /// Relative residual tolerance of the eigenvalue solve.
    pub eig_tol: f64,
    /// Where outputs go; not part of the config identity.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: None, tol: 1e-12, eig_tol: 1e-8, out: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub alpha0: f64,
    pub beta0: f64,
    pub gamma0: f64,
    #[serde(default = "one")]
    pub lipschitz: f64,
    #[serde(default = "one")]
    pub volume: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Single,
    TwoLayer,
    Checkerboard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshSection {
    pub cells: [usize; 3],
    pub layout: Layout,
    /// Height of the plane between the two layers.
    pub interface: f64,
    pub sigma: String,
    /// Load this mesh file instead of generating one.
    pub file: Option<PathBuf>,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self { cells: [8, 8, 8], layout: Layout::TwoLayer, interface: 0.5, sigma: "zmax".into(), file: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencySection {
    /// Fraction of the largest admissible frequency (default 0.7).
    pub fraction: Option<f64>,
    /// Absolute angular frequency.
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Fixed,
    Backtracking,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub mode: Mode,
    pub step_rule: StepKind,
    /// Step length of the fixed rule.
    pub step: Option<f64>,
    pub direction: Direction,
    pub max_iterations: usize,
    pub tau: f64,
    /// Relative noise added to the synthetic data.
    pub noise: f64,
    /// Start at the truth scaled by `1 + perturbation`, projected onto 𝐊.
    pub perturbation: f64,
    /// Explicit start, overriding `perturbation`.
    pub initial: Option<Vec<f64>>,
    pub min_omega_fraction: f64,
    /// Extra noise levels for the stability table; empty to skip it.
    pub stability_noise: Vec<f64>,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            step_rule: StepKind::Backtracking,
            step: None,
            direction: Direction::GaussNewton,
            max_iterations: 500,
            tau: 1.5,
            noise: 0.0,
            perturbation: 0.2,
            initial: None,
            min_omega_fraction: 0.5,
            stability_noise: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// Pairs for the Lipschitz probe.
    pub samples: usize,
    /// Parameter samples for the q0 probe.
    pub l_samples: usize,
    /// Out-of-sample directions per parameter sample in the q0 probe.
    pub h_samples: usize,
    pub mode: Mode,
    /// Modulus parameters for the logarithmic stability comparison.
    pub delta: f64,
    pub c_star: f64,
    pub t_list: Vec<f64>,
    /// Pairs for the reciprocity identity.
    pub pairs: usize,
    /// Cells per side of each mesh in the Green's function family.
    pub greens_cells: Vec<usize>,
    pub y: [f64; 3],
    pub r_list: Vec<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            samples: 50,
            l_samples: 4,
            h_samples: 100,
            mode: Mode::Full,
            delta: elastodyn::material::DEFAULT_SIGMA_DELTA,
            c_star: 1.0,
            t_list: vec![1e-1, 3e-2, 1e-2, 3e-3],
            pairs: 20,
            greens_cells: vec![16, 32],
            y: [0.5, 0.5, 0.5],
            r_list: vec![0.05, 0.1, 0.2, 0.4],
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum ConfigError {
    Read(String),
    Fields(Vec<String>),
}

impl ConfigError {
    pub fn messages(&self) -> Vec<String> {
        match self {
            ConfigError::Read(m) => vec![m.clone()],
            ConfigError::Fields(v) => v.clone(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let mut msg = e.message().to_string();
            if let Some(span) = e.span() {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                msg = format!("line {line}: {msg}");
            }
            ConfigError::Fields(vec![msg])
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(t) = o.threads {
            self.run.threads = Some(t);
        }
        if let Some(t) = o.tol {
            self.run.tol = t;
        }
        if let Some(p) = &o.out {
            self.run.out = Some(p.clone());
        }
    }

    /// Every field-level problem at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let r = &self.run;
        check(r.tol > 0.0 && r.tol < 1.0, format!("run.tol: must lie in (0, 1), got {}", r.tol));
        check(r.eig_tol > 0.0 && r.eig_tol < 1.0, format!("run.eig_tol: must lie in (0, 1), got {}", r.eig_tol));
        check(r.threads != Some(0), "run.threads: must be positive".into());

        let p = &self.prior;
        check(p.alpha0 > 0.0 && p.alpha0 < 1.0, format!("prior.alpha0: must lie in (0, 1), got {}", p.alpha0));
        check(p.beta0 > 0.0 && p.beta0 < 2.0, format!("prior.beta0: must lie in (0, 2), got {}", p.beta0));
        check(p.gamma0 > 0.0 && p.gamma0 < 1.0, format!("prior.gamma0: must lie in (0, 1), got {}", p.gamma0));
        check(p.lipschitz >= 1.0, format!("prior.lipschitz: must be >= 1, got {}", p.lipschitz));
        check(p.volume > 0.0, format!("prior.volume: must be positive, got {}", p.volume));

        let m = &self.mesh;
        if m.file.is_none() {
            check(m.cells.iter().all(|&c| c > 0), format!("mesh.cells: must be positive, got {:?}", m.cells));
            check(m.interface > 0.0 && m.interface < 1.0, format!("mesh.interface: must lie in (0, 1), got {}", m.interface));
            check(BoxFace::parse(&m.sigma).is_some(), format!("mesh.sigma: unknown box face {:?}", m.sigma));
        }

        if let Some(mat) = &self.material {
            let n = mat.lambda.len();
            check(n > 0, "material.lambda: must not be empty".into());
            check(mat.mu.len() == n, format!("material.mu: expected {n} entries, got {}", mat.mu.len()));
            check(mat.rho.len() == n, format!("material.rho: expected {n} entries, got {}", mat.rho.len()));
            if let Some(expected) = self.layout_regions() {
                check(n == expected, format!("material.lambda: the mesh has {expected} subdomains, got {n} entries"));
            }
        }

        let f = &self.frequency;
        check(!(f.fraction.is_some() && f.omega.is_some()), "frequency: give either fraction or omega, not both".into());
        if let Some(x) = f.fraction {
            check((0.0..=1.0).contains(&x), format!("frequency.fraction: must lie in [0, 1], got {x}"));
        }
        if let Some(w) = f.omega {
            check(w >= 0.0, format!("frequency.omega: must be >= 0, got {w}"));
        }

        let inv = &self.inversion;
        check(inv.tau > 1.0, format!("inversion.tau: must exceed 1, got {}", inv.tau));
        check(inv.noise >= 0.0, format!("inversion.noise: must be >= 0, got {}", inv.noise));
        check(inv.max_iterations > 0, "inversion.max_iterations: must be positive".into());
        check(inv.perturbation > -1.0, format!("inversion.perturbation: must exceed -1, got {}", inv.perturbation));
        check(inv.stability_noise.iter().all(|&x| x >= 0.0), "inversion.stability_noise: levels must be >= 0".into());
        match (inv.step_rule, inv.step) {
            (StepKind::Fixed, None) => check(false, "inversion.step: required by the fixed step rule".into()),
            (StepKind::Fixed, Some(s)) => check(s > 0.0, format!("inversion.step: must be positive, got {s}")),
            _ => {}
        }
        if let Some(l0) = &inv.initial {
            match ParamVector::new(l0.clone()) {
                Ok(v) => match self.prior_data(v.n_sub()) {
                    Ok(prior) => check(
                        ConstraintSet::compact(prior).contains(&v),
                        "inversion.initial: not in the compact admissible set".into(),
                    ),
                    Err(_) => {}
                },
                Err(e) => check(false, format!("inversion.initial: {e}")),
            }
        }

        let pr = &self.probe;
        check(pr.samples > 0, "probe.samples: must be positive".into());
        check(pr.l_samples > 0, "probe.l_samples: must be positive".into());
        check(pr.pairs > 0, "probe.pairs: must be positive".into());
        check(pr.delta > 0.0 && pr.delta < 1.0, format!("probe.delta: must lie in (0, 1), got {}", pr.delta));
        check(pr.c_star > 0.0, format!("probe.c_star: must be positive, got {}", pr.c_star));
        check(!pr.t_list.is_empty() && pr.t_list.iter().all(|&t| t > 0.0), "probe.t_list: needs positive steps".into());
        check(!pr.greens_cells.is_empty() && pr.greens_cells.iter().all(|&c| c > 0), "probe.greens_cells: needs positive sizes".into());
        check(pr.r_list.len() >= 2 && pr.r_list.iter().all(|&r| r > 0.0), "probe.r_list: needs at least two positive radii".into());
        check(pr.y.iter().all(|&c| c > 0.0 && c < 1.0), format!("probe.y: must lie inside the unit box, got {:?}", pr.y));

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Fields(errs))
        }
    }

    fn layout_regions(&self) -> Option<usize> {
        if self.mesh.file.is_some() {
            return None;
        }
        Some(self.blocks().iter().map(|b| b.id).max().unwrap_or(0))
    }

    pub fn blocks(&self) -> Vec<Block> {
        match self.mesh.layout {
            Layout::Single => vec![Block::unit(1)],
            Layout::TwoLayer => two_layer_blocks(self.mesh.interface),
            Layout::Checkerboard => checkerboard_blocks(),
        }
    }

    pub fn sigma(&self) -> SigmaSelector {
        SigmaSelector::face(BoxFace::parse(&self.mesh.sigma).unwrap_or(BoxFace::ZMax))
    }

    pub fn build_mesh(&self) -> elastodyn::Result<PartitionedMesh> {
        match &self.mesh.file {
            Some(path) => load_mesh(path),
            None => {
                let [nx, ny, nz] = self.mesh.cells;
                build_block_mesh(nx, ny, nz, &self.blocks(), self.sigma())
            }
        }
    }

    /// The generated mesh at `n` cells per side with the configured layout.
    pub fn build_cube(&self, n: usize) -> elastodyn::Result<PartitionedMesh> {
        build_block_mesh(n, n, n, &self.blocks(), self.sigma())
    }

    pub fn prior_data(&self, n_sub: usize) -> elastodyn::Result<PriorData> {
        let p = &self.prior;
        PriorData::new(p.alpha0, p.beta0, p.gamma0, p.lipschitz, p.volume, n_sub)
    }

    pub fn truth(&self) -> Option<elastodyn::Result<ParamVector>> {
        self.material.as_ref().map(|m| ParamVector::from_parts(&m.lambda, &m.mu, &m.rho))
    }

    /// SHA-256 of the resolved configuration in canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
