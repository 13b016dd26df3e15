//! Exploration sessions: an ordered, undoable log of conditioning, removal and
//! analysis steps over a base dataset.
//!
//! The current state is never edited in place. Every step is applied to a copy
//! of the state and committed only on success, and undo replays the shortened
//! log from the base dataset, so a session is always exactly what its log
//! says it is.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationTable, Dataset, Factor, Scope};
use crate::error::{Error, Result};
use crate::impute::{impute_knn, ImputeWarning, DEFAULT_NEIGHBORS as DEFAULT_IMPUTE_NEIGHBORS};
use crate::mds::{isomap_from_points, Disconnection};
use crate::multitest::{multi_t_test, permutation_null, PermutationSpec, TestTable, Variant, DEFAULT_Q_REPORT};
use crate::nulls::{compare_to_null, expected_projection_content, Conditioning, NullComparison, NullEstimate, NullSpec, DEFAULT_TRIALS};
use crate::preprocess::{center_samples, group_mean_center, standardize_variables, variance_filter_indices};
use crate::svd::{compute_dual_svd, ApproximationError, DualSvdSystem, IndexSet, DEFAULT_RANK_TOL};

/// Schema tag of exported session files.
pub const SCHEMA: &str = "dualview.session/v1";

/// Level assigned to samples without a value for the tested factor.
pub const UNANNOTATED_LEVEL: &str = "NA";

const DEFAULT_COMPONENTS: usize = 3;

fn default_components() -> usize {
    DEFAULT_COMPONENTS
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_impute_k() -> usize {
    DEFAULT_IMPUTE_NEIGHBORS
}

/// Which matrix a PCA step decomposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    /// Standardized variables.
    #[default]
    Correlation,
    /// Sample-centered variables.
    Covariance,
    /// The current matrix as is.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Impute {
        #[serde(default = "default_impute_k")]
        k: usize,
    },
    Center,
    Standardize,
    VarianceFilter {
        keep: usize,
    },
    GroupCenter {
        factor: String,
    },
    RemoveSamples {
        samples: Vec<String>,
        label: String,
        #[serde(default)]
        rationale: String,
    },
    Pca {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        mode: PcaMode,
        #[serde(default = "default_trials")]
        trials: usize,
        #[serde(default)]
        seed: u64,
    },
    Isomap {
        k: usize,
        #[serde(default = "default_components")]
        dims: usize,
        #[serde(default)]
        disconnected: Disconnection,
    },
    TTest {
        factor: String,
        a: String,
        b: String,
        alpha: f64,
        #[serde(default)]
        variant: Variant,
        #[serde(default)]
        permutations: Option<usize>,
        #[serde(default = "default_trials")]
        null_trials: usize,
        #[serde(default)]
        seed: u64,
    },
    NullEstimate {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        conditioning: Option<Conditioning>,
        #[serde(default = "default_trials")]
        trials: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidParameter(format!("{name} must be at least 1")));
    }
    Ok(())
}

impl Step {
    pub fn kind(&self) -> &'static str {
        match self {
            Step::Impute { .. } => "impute",
            Step::Center => "center",
            Step::Standardize => "standardize",
            Step::VarianceFilter { .. } => "variance_filter",
            Step::GroupCenter { .. } => "group_center",
            Step::RemoveSamples { .. } => "remove_samples",
            Step::Pca { .. } => "pca",
            Step::Isomap { .. } => "isomap",
            Step::TTest { .. } => "t_test",
            Step::NullEstimate { .. } => "null_estimate",
        }
    }

    /// Checks that do not depend on the session state.
    pub fn validate(&self) -> Result<()> {
        match self {
            Step::Impute { k } => positive("imputation neighbor count", *k),
            Step::Center | Step::Standardize => Ok(()),
            Step::VarianceFilter { keep } => positive("variance filter keep count", *keep),
            Step::GroupCenter { factor } if factor.is_empty() => {
                Err(Error::InvalidParameter("group centering needs a factor name".into()))
            }
            Step::GroupCenter { .. } => Ok(()),
            Step::RemoveSamples { samples, label, .. } => {
                if samples.is_empty() {
                    return Err(Error::InvalidParameter("no samples selected for removal".into()));
                }
                if label.is_empty() {
                    return Err(Error::InvalidParameter("a removed signal needs a label".into()));
                }
                Ok(())
            }
            Step::Pca { components, trials, .. } => {
                positive("component count", *components)?;
                positive("null trial count", *trials)
            }
            Step::Isomap { k, dims, .. } => {
                positive("neighbor count", *k)?;
                positive("embedding dimension", *dims)
            }
            Step::TTest {
                alpha,
                permutations,
                null_trials,
                a,
                b,
                ..
            } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "significance level must lie in (0, 1), got {alpha}"
                    )));
                }
                if a == b {
                    return Err(Error::InvalidParameter("the two compared levels must differ".into()));
                }
                if let Some(b) = permutations {
                    positive("permutation count", *b)?;
                }
                positive("null trial count", *null_trials)
            }
            Step::NullEstimate { components, trials, .. } => {
                positive("component count", *components)?;
                positive("null trial count", *trials)
            }
        }
    }
}

/// Identifiers and row-major coordinates for a synchronized pair of biplots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiplotView {
    pub components: IndexSet,
    /// `λ_m` for `m ∈ S`; the pairing of two rows is `Σ a_m b_m / λ_m`.
    pub weights: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub projection_content: f64,
    pub null: NullComparison,
    pub sample_ids: Vec<String>,
    pub variable_ids: Vec<String>,
    pub sample_coords: Vec<Vec<f64>>,
    pub variable_coords: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mode: PcaMode,
    pub null_spec: NullSpec,
    pub approximation_error: ApproximationError,
    pub biplot: BiplotView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsomapResult {
    pub k: usize,
    pub dims: usize,
    /// Embedded samples; fewer than the current samples when only the
    /// largest graph component was kept.
    pub sample_ids: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    pub edges: Vec<GraphEdge>,
    pub singular_values: Vec<f64>,
    pub projection_content: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub table: TestTable,
    pub dof_adjustment: usize,
    pub permutation_p: Option<Vec<f64>>,
    pub rejected: usize,
    pub q_report_threshold: f64,
    pub reported: usize,
    /// Projection content of the standardized rejected variables against a
    /// matched Gaussian null; absent with fewer than two usable variables.
    pub rejected_content: Option<NullComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullEstimateResult {
    pub spec: NullSpec,
    pub components: IndexSet,
    pub estimate: NullEstimate,
}

/// What an applied step produced besides the new matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Artifact {
    Impute { warnings: Vec<ImputeWarning> },
    Standardize { dropped: Vec<String> },
    VarianceFilter { kept: usize },
    Pca(PcaResult),
    Isomap(IsomapResult),
    TTest(TestResult),
    NullEstimate(NullEstimateResult),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub label: String,
    pub rationale: String,
    pub samples: Vec<String>,
    /// Position of the removing step in the log.
    pub step: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default)]
    pub samples: Option<AnnotationTable>,
    #[serde(default)]
    pub variables: Option<AnnotationTable>,
}

impl Annotations {
    fn validate(&self, base: &Dataset) -> Result<()> {
        for (table, scope, ids, kind) in [
            (&self.samples, Scope::Sample, base.sample_ids(), "sample"),
            (&self.variables, Scope::Variable, base.variable_ids(), "variable"),
        ] {
            let Some(table) = table else { continue };
            if table.scope != scope {
                return Err(Error::InvalidParameter(format!("{kind} annotations have the wrong scope")));
            }
            for column in table.factors.values() {
                if let Some(id) = column.keys().find(|id| !ids.contains(id)) {
                    return Err(Error::UnknownId { kind, id: id.clone() });
                }
            }
        }
        Ok(())
    }

    fn sample_table(&self) -> Result<&AnnotationTable> {
        self.samples
            .as_ref()
            .ok_or_else(|| Error::Session("no sample annotations are attached".into()))
    }

    /// Factor over `ids`; every sample must be annotated.
    pub fn sample_factor(&self, name: &str, ids: &[String]) -> Result<Factor> {
        self.sample_table()?.factor(name, ids)
    }

    /// Factor over `ids` with unannotated samples collected in [`UNANNOTATED_LEVEL`].
    fn partial_sample_factor(&self, name: &str, ids: &[String]) -> Result<Factor> {
        let column = self
            .sample_table()?
            .get(name)
            .ok_or_else(|| Error::UnknownFactor(name.to_string()))?;
        let labels: Vec<&str> = ids
            .iter()
            .map(|id| column.get(id).map_or(UNANNOTATED_LEVEL, String::as_str))
            .collect();
        Factor::from_labels(name, &labels)
    }
}

/// Decomposition behind the most recent PCA step, kept for biplot queries.
#[derive(Debug)]
struct PcaCache {
    system: DualSvdSystem,
    sample_ids: Vec<String>,
    variable_ids: Vec<String>,
    null_spec: NullSpec,
}

/// Everything derived from the base dataset by the step log.
#[derive(Debug, Clone)]
pub struct State {
    pub data: Dataset,
    pub dof_adjustment: usize,
    /// Conditioning the current matrix has received, mirrored by null models.
    pub conditioning: Conditioning,
    pub detected_signals: Vec<Signal>,
    /// One entry per log step.
    pub results: Vec<Option<Artifact>>,
    pca: Option<Arc<PcaCache>>,
}

impl State {
    fn fresh(base: &Dataset) -> Self {
        State {
            data: base.clone(),
            dof_adjustment: 0,
            conditioning: Conditioning::Raw,
            detected_signals: Vec::new(),
            results: Vec::new(),
            pca: None,
        }
    }
}

fn at_least(current: Conditioning, floor: Conditioning) -> Conditioning {
    let rank = |c| match c {
        Conditioning::Raw => 0,
        Conditioning::Centered => 1,
        Conditioning::Standardized => 2,
    };
    if rank(current) >= rank(floor) {
        current
    } else {
        floor
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn biplot_view(
    system: &DualSvdSystem,
    s: &IndexSet,
    null_spec: &NullSpec,
    sample_ids: &[String],
    variable_ids: &[String],
) -> Result<BiplotView> {
    let coords = system.biplot_coordinates(s)?;
    let observed = system.projection_content(s)?;
    Ok(BiplotView {
        components: s.clone(),
        weights: coords.weights.clone(),
        singular_values: system.singular_values().to_vec(),
        projection_content: observed,
        null: compare_to_null(observed, null_spec, s)?,
        sample_ids: sample_ids.to_vec(),
        variable_ids: variable_ids.to_vec(),
        sample_coords: rows(&coords.sample_coords),
        variable_coords: rows(&coords.variable_coords),
    })
}

fn leading(components: usize, rank: usize) -> Result<IndexSet> {
    IndexSet::leading(components.min(rank))
}

fn advance(base_annotations: &Annotations, state: &State, step: &Step, index: usize) -> Result<State> {
    let mut next = state.clone();
    let data = &state.data;
    let artifact = match step {
        Step::Impute { k } => {
            let imputed = impute_knn(data, *k)?;
            next.data = imputed.dataset;
            Some(Artifact::Impute {
                warnings: imputed.warnings,
            })
        }
        Step::Center => {
            next.data = data.with_values(center_samples(data.complete_values()?)?)?;
            next.dof_adjustment += 1;
            next.conditioning = at_least(state.conditioning, Conditioning::Centered);
            None
        }
        Step::Standardize => {
            let s = standardize_variables(data.complete_values()?)?;
            next.data = data.select_variables(&s.kept)?.with_values(s.values)?;
            next.dof_adjustment += 1;
            next.conditioning = Conditioning::Standardized;
            Some(Artifact::Standardize {
                dropped: s.dropped.iter().map(|&j| data.variable_ids()[j].clone()).collect(),
            })
        }
        Step::VarianceFilter { keep } => {
            let kept = variance_filter_indices(data.complete_values()?, *keep);
            next.data = data.select_variables(&kept)?;
            Some(Artifact::VarianceFilter { kept: kept.len() })
        }
        Step::GroupCenter { factor } => {
            let f = base_annotations.sample_factor(factor, data.sample_ids())?;
            next.data = data.with_values(group_mean_center(data.complete_values()?, &f)?)?;
            next.dof_adjustment += f.levels.len();
            next.conditioning = at_least(state.conditioning, Conditioning::Centered);
            None
        }
        Step::RemoveSamples {
            samples,
            label,
            rationale,
        } => {
            let mut drop = vec![false; data.n()];
            for id in samples {
                let k = data.sample_index(id).ok_or_else(|| Error::UnknownId {
                    kind: "sample",
                    id: id.clone(),
                })?;
                if drop[k] {
                    return Err(Error::DuplicateId {
                        kind: "sample",
                        id: id.clone(),
                    });
                }
                drop[k] = true;
            }
            let keep: Vec<usize> = (0..data.n()).filter(|&k| !drop[k]).collect();
            if keep.is_empty() {
                return Err(Error::InvalidParameter("cannot remove every sample".into()));
            }
            next.data = data.select_samples(&keep)?;
            next.detected_signals.push(Signal {
                label: label.clone(),
                rationale: rationale.clone(),
                samples: samples.clone(),
                step: index,
            });
            None
        }
        Step::Pca {
            components,
            mode,
            trials,
            seed,
        } => {
            let x = data.complete_values()?;
            let (matrix, variable_ids, conditioning) = match mode {
                PcaMode::Correlation => {
                    let s = standardize_variables(x)?;
                    let ids = s.kept.iter().map(|&j| data.variable_ids()[j].clone()).collect();
                    (s.values, ids, Conditioning::Standardized)
                }
                PcaMode::Covariance => (
                    center_samples(x)?,
                    data.variable_ids().to_vec(),
                    at_least(state.conditioning, Conditioning::Centered),
                ),
                PcaMode::Raw => (x.clone(), data.variable_ids().to_vec(), state.conditioning),
            };
            let system = compute_dual_svd(&matrix, DEFAULT_RANK_TOL)?;
            let s = leading(*components, system.rank())?;
            let null_spec = NullSpec {
                p: matrix.nrows(),
                n: matrix.ncols(),
                conditioning,
                trials: *trials,
                seed: *seed,
            };
            let biplot = biplot_view(&system, &s, &null_spec, data.sample_ids(), &variable_ids)?;
            let approximation_error = system.approximation_error(&s)?;
            next.pca = Some(Arc::new(PcaCache {
                system,
                sample_ids: data.sample_ids().to_vec(),
                variable_ids,
                null_spec,
            }));
            Some(Artifact::Pca(PcaResult {
                mode: *mode,
                null_spec,
                approximation_error,
                biplot,
            }))
        }
        Step::Isomap { k, dims, disconnected } => {
            let emb = isomap_from_points(data.complete_values()?, *k, *dims, *disconnected)?;
            let id = |i: usize| data.sample_ids()[i].clone();
            let s = IndexSet::leading(emb.coords.ncols())?;
            Some(Artifact::Isomap(IsomapResult {
                k: *k,
                dims: emb.coords.ncols(),
                sample_ids: emb.nodes.iter().map(|&i| id(i)).collect(),
                coords: rows(&emb.coords),
                edges: emb
                    .graph
                    .edge_list()
                    .into_iter()
                    .map(|(a, b, weight)| GraphEdge { a: id(a), b: id(b), weight })
                    .collect(),
                singular_values: emb.system.singular_values().to_vec(),
                projection_content: emb.system.projection_content(&s)?,
            }))
        }
        Step::TTest {
            factor,
            a,
            b,
            alpha,
            variant,
            permutations,
            null_trials,
            seed,
        } => {
            data.complete_values()?;
            let f = base_annotations.partial_sample_factor(factor, data.sample_ids())?;
            let mut table = multi_t_test(data, &f, a, b, *variant, state.dof_adjustment)?;
            table.apply_fdr(*alpha)?;
            let permutation_p = permutations
                .map(|trials| {
                    permutation_null(
                        data,
                        &f,
                        a,
                        b,
                        *variant,
                        state.dof_adjustment,
                        PermutationSpec { trials, seed: *seed },
                    )
                })
                .transpose()?;
            let rejected = table.rejected_indices();
            let rejected_content = rejected_content(data, &rejected, *null_trials, *seed);
            Some(Artifact::TTest(TestResult {
                dof_adjustment: state.dof_adjustment,
                permutation_p,
                rejected: rejected.len(),
                q_report_threshold: DEFAULT_Q_REPORT,
                reported: table.rows.iter().filter(|r| r.q <= DEFAULT_Q_REPORT).count(),
                rejected_content,
                table,
            }))
        }
        Step::NullEstimate {
            components,
            conditioning,
            trials,
            seed,
        } => {
            let spec = NullSpec {
                p: data.p(),
                n: data.n(),
                conditioning: conditioning.unwrap_or(state.conditioning),
                trials: *trials,
                seed: *seed,
            };
            let s = leading(*components, data.p().min(data.n()))?;
            let estimate = expected_projection_content(&spec, &s)?;
            Some(Artifact::NullEstimate(NullEstimateResult {
                spec,
                components: s,
                estimate,
            }))
        }
    };
    next.results.push(artifact);
    Ok(next)
}

/// α₂ of the leading (up to three) components of the standardized rejected
/// variables, set against the Gaussian null of the same shape.
fn rejected_content(data: &Dataset, rejected: &[usize], trials: usize, seed: u64) -> Option<NullComparison> {
    if rejected.len() < 2 {
        return None;
    }
    let attempt = || -> Result<NullComparison> {
        let sub = data.complete_values()?.select_rows(rejected);
        let s = standardize_variables(&sub)?;
        let system = compute_dual_svd(&s.values, DEFAULT_RANK_TOL)?;
        let set = leading(DEFAULT_COMPONENTS, system.rank())?;
        let spec = NullSpec {
            p: s.values.nrows(),
            n: s.values.ncols(),
            conditioning: Conditioning::Standardized,
            trials,
            seed,
        };
        compare_to_null(system.projection_content(&set)?, &spec, &set)
    };
    match attempt() {
        Ok(c) => Some(c),
        Err(e) => {
            log::debug!("no projection content for the rejected variables: {e}");
            None
        }
    }
}

fn replay(base: &Dataset, annotations: &Annotations, steps: &[Step]) -> Result<State> {
    let mut state = State::fresh(base);
    for (i, step) in steps.iter().enumerate() {
        step.validate()?;
        state = advance(annotations, &state, step, i)?;
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct Session {
    base: Dataset,
    annotations: Annotations,
    log: Vec<Step>,
    state: State,
}

/// Portable session file: base data, annotations, step log and every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionFile {
    pub schema: String,
    pub base: Dataset,
    #[serde(default)]
    pub annotations: Annotations,
    pub steps: Vec<Step>,
    pub results: Vec<Option<Artifact>>,
    pub detected_signals: Vec<Signal>,
    pub dof_adjustment: usize,
    pub current_variables: usize,
    pub current_samples: usize,
}

/// Compact view of a session for listings.
#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary<'a> {
    pub p: usize,
    pub n: usize,
    pub steps: &'a [Step],
    pub dof_adjustment: usize,
    pub conditioning: Conditioning,
    pub detected_signals: &'a [Signal],
    pub sample_ids: &'a [String],
}

impl Session {
    pub fn new(base: Dataset, annotations: Annotations) -> Result<Self> {
        annotations.validate(&base)?;
        let state = State::fresh(&base);
        Ok(Session {
            base,
            annotations,
            log: Vec::new(),
            state,
        })
    }

    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn annotations(&self) -> &Annotations {
        &self.annotations
    }

    pub fn steps(&self) -> &[Step] {
        &self.log
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn current(&self) -> &Dataset {
        &self.state.data
    }

    pub fn dof_adjustment(&self) -> usize {
        self.state.dof_adjustment
    }

    pub fn detected_signals(&self) -> &[Signal] {
        &self.state.detected_signals
    }

    pub fn results(&self) -> &[Option<Artifact>] {
        &self.state.results
    }

    pub fn summary(&self) -> SessionSummary<'_> {
        SessionSummary {
            p: self.state.data.p(),
            n: self.state.data.n(),
            steps: &self.log,
            dof_adjustment: self.state.dof_adjustment,
            conditioning: self.state.conditioning,
            detected_signals: &self.state.detected_signals,
            sample_ids: self.state.data.sample_ids(),
        }
    }

    /// Apply a step; on error the session is left untouched.
    pub fn apply(&mut self, step: Step) -> Result<Option<&Artifact>> {
        step.validate()?;
        let next = advance(&self.annotations, &self.state, &step, self.log.len())?;
        self.log.push(step);
        self.state = next;
        Ok(self.state.results.last().and_then(Option::as_ref))
    }

    /// Remove a human-selected sample subset, recording it as a detected signal.
    pub fn remove_signal(&mut self, samples: Vec<String>, label: &str, rationale: &str) -> Result<()> {
        self.apply(Step::RemoveSamples {
            samples,
            label: label.to_string(),
            rationale: rationale.to_string(),
        })
        .map(|_| ())
    }

    /// Drop the last step and re-derive the state from the base dataset.
    pub fn undo(&mut self) -> Result<Step> {
        let last = self
            .log
            .last()
            .cloned()
            .ok_or_else(|| Error::Session("nothing to undo".into()))?;
        let state = replay(&self.base, &self.annotations, &self.log[..self.log.len() - 1])?;
        self.log.pop();
        self.state = state;
        Ok(last)
    }

    /// Re-derive the state from scratch.
    pub fn replay(&self) -> Result<State> {
        replay(&self.base, &self.annotations, &self.log)
    }

    /// Most recent t-test result.
    pub fn latest_test(&self) -> Option<&TestResult> {
        self.state.results.iter().rev().find_map(|r| match r {
            Some(Artifact::TTest(t)) => Some(t),
            _ => None,
        })
    }

    /// Synchronized biplot coordinates for any index set of the most recent
    /// PCA decomposition, with the matching null comparison.
    pub fn biplot(&self, s: &IndexSet) -> Result<BiplotView> {
        let cache = self
            .state
            .pca
            .as_ref()
            .ok_or_else(|| Error::Session("no pca step has been applied".into()))?;
        biplot_view(&cache.system, s, &cache.null_spec, &cache.sample_ids, &cache.variable_ids)
    }

    pub fn export(&self) -> SessionFile {
        SessionFile {
            schema: SCHEMA.to_string(),
            base: self.base.clone(),
            annotations: self.annotations.clone(),
            steps: self.log.clone(),
            results: self.state.results.clone(),
            detected_signals: self.state.detected_signals.clone(),
            dof_adjustment: self.state.dof_adjustment,
            current_variables: self.state.data.p(),
            current_samples: self.state.data.n(),
        }
    }

    pub fn export_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.export())?)
    }

    /// Rebuild a session by replaying an exported log. The replayed artifacts
    /// must match the recorded ones exactly.
    pub fn import(file: SessionFile) -> Result<Self> {
        if file.schema != SCHEMA {
            return Err(Error::Session(format!(
                "unsupported schema `{}`, expected `{SCHEMA}`",
                file.schema
            )));
        }
        let mut session = Session::new(file.base, file.annotations)?;
        for (i, step) in file.steps.into_iter().enumerate() {
            session
                .apply(step)
                .map_err(|e| Error::Session(format!("step {i} failed on replay: {e}")))?;
        }
        if !file.results.is_empty() {
            let replayed = serde_json::to_value(&session.state.results)?;
            let recorded = serde_json::to_value(&file.results)?;
            if replayed != recorded {
                return Err(Error::Session("replayed results differ from the recorded ones".into()));
            }
        }
        Ok(session)
    }

    pub fn import_json(text: &str) -> Result<Self> {
        Self::import(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_annotations, Delimiter};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 12 variables × 8 samples; samples 0..4 in group "x", the rest in "y",
    /// with the first three variables shifted in group "y".
    fn fixture() -> Session {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(12, 8, |j, k| {
            let shift = if j < 3 && k >= 4 { 4.0 } else { 0.0 };
            shift + rng.random::<f64>() + j as f64
        });
        let d = Dataset::from_matrix(x).unwrap();
        let ann = "id\tgroup\tbatch\ns1\tx\tb1\ns2\tx\tb2\ns3\tx\tb1\ns4\tx\tb2\n\
                   s5\ty\tb1\ns6\ty\tb2\ns7\ty\tb1\ns8\ty\tb2\n";
        let table = parse_annotations(ann, Scope::Sample, Delimiter::Tab, &d).unwrap();
        Session::new(
            d,
            Annotations {
                samples: Some(table),
                variables: None,
            },
        )
        .unwrap()
    }

    fn pca() -> Step {
        Step::Pca {
            components: 3,
            mode: PcaMode::Correlation,
            trials: 5,
            seed: 1,
        }
    }

    #[test]
    fn fresh_session_is_the_base() {
        let s = fixture();
        assert!(s.current().bitwise_eq(s.base()));
        assert!(s.replay().unwrap().data.bitwise_eq(s.base()));
        let table = s.annotations().samples.as_ref().unwrap();
        assert_eq!(table.get("group").unwrap()["s5"], "y");
    }

    #[test]
    fn sessions_are_independent() {
        let mut a = fixture();
        let b = fixture();
        a.apply(Step::VarianceFilter { keep: 2 }).unwrap();
        assert_eq!(a.current().p(), 2);
        assert_eq!(b.current().p(), 12);
    }

    #[test]
    fn failing_step_leaves_session_unchanged() {
        let mut s = fixture();
        s.apply(Step::Center).unwrap();
        let before = s.export_json().unwrap();
        assert!(s.apply(Step::GroupCenter { factor: "nope".into() }).is_err());
        assert!(s.apply(Step::VarianceFilter { keep: 0 }).is_err());
        assert!(s
            .apply(Step::Isomap {
                k: 20,
                dims: 2,
                disconnected: Disconnection::Fail
            })
            .is_err());
        assert_eq!(s.export_json().unwrap(), before);
    }

    #[test]
    fn undo_restores_and_errors_when_empty() {
        let mut s = fixture();
        assert!(matches!(s.undo(), Err(Error::Session(_))));
        s.apply(Step::Center).unwrap();
        s.apply(Step::VarianceFilter { keep: 4 }).unwrap();
        s.undo().unwrap();
        assert_eq!(s.current().p(), 12);
        assert_eq!(s.dof_adjustment(), 1);
        s.undo().unwrap();
        assert!(s.current().bitwise_eq(s.base()));
        assert_eq!(s.dof_adjustment(), 0);
    }

    #[test]
    fn remove_signal_and_undo() {
        let mut s = fixture();
        s.remove_signal(vec!["s1".into(), "s2".into()], "cluster", "tight group")
            .unwrap();
        assert_eq!(s.current().n(), 6);
        assert_eq!(s.detected_signals()[0].samples, vec!["s1", "s2"]);
        assert!(s.remove_signal(vec![], "empty", "").is_err());
        let all: Vec<String> = s.current().sample_ids().to_vec();
        assert!(s.remove_signal(all, "all", "").is_err());
        assert!(s.remove_signal(vec!["s1".into()], "gone", "").is_err());
        s.undo().unwrap();
        assert!(s.current().bitwise_eq(s.base()));
        assert!(s.detected_signals().is_empty());
    }

    #[test]
    fn dof_adjustment_reaches_the_test() {
        let mut s = fixture();
        let test = Step::TTest {
            factor: "group".into(),
            a: "x".into(),
            b: "y".into(),
            alpha: 0.05,
            variant: Variant::Pooled,
            permutations: None,
            null_trials: 3,
            seed: 0,
        };
        s.apply(test.clone()).unwrap();
        assert_eq!(s.latest_test().unwrap().table.rows[0].df, 6.0);
        s.apply(Step::GroupCenter { factor: "batch".into() }).unwrap();
        assert_eq!(s.dof_adjustment(), 2);
        s.apply(test).unwrap();
        let result = s.latest_test().unwrap();
        assert_eq!(result.table.rows[0].df, 4.0);
        assert_eq!(result.dof_adjustment, 2);
        assert!(result.table.rows[..3].iter().all(|r| r.rejected));
        assert!(result.rejected_content.is_some());
    }

    #[test]
    fn pca_carries_null_comparison_and_biplot() {
        let mut s = fixture();
        s.apply(Step::VarianceFilter { keep: 6 }).unwrap();
        let Some(Artifact::Pca(r)) = s.apply(pca()).unwrap().cloned() else {
            panic!("pca artifact expected")
        };
        assert_eq!(r.biplot.components.indices(), &[1, 2, 3]);
        assert_eq!(r.biplot.variable_ids.len(), 6);
        assert_eq!(r.biplot.sample_coords.len(), 8);
        assert!(r.biplot.null.observed > r.biplot.null.null_mean);
        let view = s.biplot(&IndexSet::new(vec![1, 2, 3]).unwrap()).unwrap();
        assert_eq!(view, r.biplot);
        let other = s.biplot(&IndexSet::new(vec![2, 4]).unwrap()).unwrap();
        assert_eq!(other.weights.len(), 2);
        assert!(s.biplot(&IndexSet::new(vec![40]).unwrap()).is_err());
    }

    #[test]
    fn biplot_needs_pca() {
        let s = fixture();
        assert!(s.biplot(&IndexSet::leading(2).unwrap()).is_err());
    }

    #[test]
    fn export_import_is_bitwise_stable() {
        let mut s = fixture();
        s.apply(Step::GroupCenter { factor: "batch".into() }).unwrap();
        s.apply(pca()).unwrap();
        s.apply(Step::Isomap {
            k: 5,
            dims: 2,
            disconnected: Disconnection::Fail,
        })
        .unwrap();
        s.apply(Step::TTest {
            factor: "group".into(),
            a: "x".into(),
            b: "y".into(),
            alpha: 0.01,
            variant: Variant::Welch,
            permutations: Some(30),
            null_trials: 3,
            seed: 4,
        })
        .unwrap();
        s.apply(Step::NullEstimate {
            components: 2,
            conditioning: None,
            trials: 4,
            seed: 2,
        })
        .unwrap();
        let text = s.export_json().unwrap();
        let back = Session::import_json(&text).unwrap();
        assert_eq!(back.export_json().unwrap(), text);
        assert!(back.current().bitwise_eq(s.current()));
    }

    #[test]
    fn tampered_results_are_detected() {
        let mut s = fixture();
        s.apply(pca()).unwrap();
        let mut file = s.export();
        if let Some(Some(Artifact::Pca(r))) = file.results.get_mut(0) {
            r.biplot.projection_content += 1e-9;
        }
        assert!(Session::import(file).is_err());
        let mut file = s.export();
        file.schema = "other/v0".into();
        assert!(Session::import(file).is_err());
    }

    #[test]
    fn step_json_shape() {
        let step: Step = serde_json::from_str(r#"{"kind":"variance_filter","keep":630}"#).unwrap();
        assert_eq!(step, Step::VarianceFilter { keep: 630 });
        let step: Step = serde_json::from_str(r#"{"kind":"pca"}"#).unwrap();
        assert_eq!(
            step,
            Step::Pca {
                components: 3,
                mode: PcaMode::Correlation,
                trials: DEFAULT_TRIALS,
                seed: 0
            }
        );
        let text = serde_json::to_string(&step).unwrap();
        assert!(text.contains("\"seed\":0"));
        assert!(serde_json::from_str::<Step>(r#"{"kind":"variance_filter","keep":5,"x":1}"#).is_err());
        assert!(serde_json::from_str::<Step>(r#"{"kind":"shuffle"}"#).is_err());
    }
}
