//! `dualview` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dualview_core::dataset::{Delimiter, MatrixFormat, Orientation};
use dualview_core::error::Error as CoreError;
use dualview_core::explorer::{Artifact, PcaMode, Session, Step};
use dualview_core::mds::Disconnection;
use dualview_core::multitest::{bh_reject, q_values, Variant};
use dualview_core::nulls::{Conditioning, DEFAULT_TRIALS};
use dualview_core::svd::IndexSet;

use crate::script::{apply_all, read_text, SessionInputs, SessionScript};
use crate::server::{self, ServeConfig};
use crate::GatewayError;

#[derive(Debug, Parser)]
#[command(name = "dualview", version, about = "Synchronized-biplot exploration of large-p small-N data")]
pub struct Cli {
    /// Log filter (error, warn, info, debug).
    #[arg(long, global = true, env = "DUALVIEW_LOG", default_value = "warn")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DelimiterArg {
    Auto,
    Tab,
    Comma,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Correlation,
    Covariance,
    Raw,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConditioningArg {
    Raw,
    Centered,
    Standardized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExportWhat {
    /// The full session file.
    Session,
    /// The most recent test table as delimited text.
    Tests,
    /// The current matrix as delimited text.
    Matrix,
    /// Biplot coordinates of the most recent PCA for `--components`.
    Biplot,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Delimited matrix file (first row sample ids, first column variable ids).
    pub matrix: PathBuf,
    #[arg(long, value_enum, default_value_t = DelimiterArg::Auto)]
    pub delimiter: DelimiterArg,
    /// The file has one sample per row instead of one variable per row.
    #[arg(long)]
    pub samples_in_rows: bool,
    /// Impute missing entries from this many nearest variables first.
    #[arg(long, value_name = "K")]
    pub impute: Option<usize>,
}

impl MatrixArgs {
    fn format(&self) -> MatrixFormat {
        MatrixFormat {
            delimiter: match self.delimiter {
                DelimiterArg::Auto => Delimiter::Auto,
                DelimiterArg::Tab => Delimiter::Tab,
                DelimiterArg::Comma => Delimiter::Comma,
            },
            orientation: if self.samples_in_rows {
                Orientation::SamplesInRows
            } else {
                Orientation::VariablesInRows
            },
        }
    }

    fn inputs(&self, sample_annotations: Option<&Path>) -> Result<SessionInputs, GatewayError> {
        Ok(SessionInputs {
            matrix: read_text(&self.matrix)?,
            format: self.format(),
            sample_annotations: sample_annotations.map(read_text).transpose()?,
            variable_annotations: None,
        })
    }

    fn prefix(&self) -> Vec<Step> {
        self.impute.map(|k| Step::Impute { k }).into_iter().collect()
    }
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Write the result here instead of standard output.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a matrix and write it back normalized (variables in rows, tab-delimited).
    Import {
        #[command(flatten)]
        input: MatrixArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Principal components with synchronized biplot coordinates and a null comparison.
    Pca {
        #[command(flatten)]
        input: MatrixArgs,
        /// Number of leading components to report.
        #[arg(long, default_value_t = 3)]
        keep: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Correlation)]
        mode: ModeArg,
        /// Keep only this many highest-variance variables first.
        #[arg(long, value_name = "N")]
        top_variance: Option<usize>,
        /// Monte-Carlo trials for the null projection content.
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Geodesic (ISOMAP) embedding of the samples.
    Isomap {
        #[command(flatten)]
        input: MatrixArgs,
        /// Neighbors per sample in the graph.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        dims: usize,
        /// Embed the largest connected component instead of failing.
        #[arg(long)]
        largest_component: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-variable two-sample t-tests with Benjamini–Hochberg rejections.
    Ttest {
        #[command(flatten)]
        input: MatrixArgs,
        /// Sample annotation table holding the factor.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        factor: String,
        /// First level.
        #[arg(long = "a")]
        level_a: String,
        /// Second level.
        #[arg(long = "b")]
        level_b: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Unequal-variance statistic.
        #[arg(long)]
        welch: bool,
        /// Also compute permutation p-values from this many relabelings.
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// q-values for a list of p-values (one per line, or a column named `p`).
    Qvalues {
        input: PathBuf,
        /// Also flag rejections at this level.
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Expected projection content under a Gaussian null of the given shape.
    Null {
        #[arg(long)]
        p: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, value_enum, default_value_t = ConditioningArg::Standardized)]
        conditioning: ConditioningArg,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Scripted sessions.
    Session {
        #[command(subcommand)]
        command: SessionCommand,
    },
    /// Extract artifacts from a saved session file.
    Export {
        session: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportWhat::Session)]
        what: ExportWhat,
        /// Component indices for `--what biplot`, e.g. `1,2,3`.
        #[arg(long, default_value = "1,2,3")]
        components: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the HTTP JSON service.
    Serve {
        #[arg(long, env = "PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory for session files; sessions are kept in memory only when unset.
        #[arg(long, env = "DATA_DIR")]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SessionCommand {
    /// Apply the steps of a script and write the session file.
    Run {
        script: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn emit(out: &OutArgs, text: &str) -> Result<(), GatewayError> {
    match &out.out {
        Some(path) => fs::write(path, text).map_err(|source| GatewayError::Io {
            path: path.clone(),
            source,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| GatewayError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, GatewayError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    text.push('\n');
    Ok(text)
}

/// Build a session from `inputs`, apply `steps` and return the last artifact.
fn run_steps(inputs: SessionInputs, steps: Vec<Step>) -> Result<(Session, Option<Artifact>), GatewayError> {
    let mut session = inputs.session()?;
    apply_all(&mut session, &steps)?;
    let last = session.results().last().cloned().flatten();
    Ok((session, last))
}

fn parse_p_values(text: &str) -> Result<Vec<f64>, GatewayError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let mut column = 0;
    if let Some((_, first)) = lines.peek() {
        if first.trim().parse::<f64>().is_err() {
            let header: Vec<&str> = first.split(['\t', ',']).map(str::trim).collect();
            column = header.iter().position(|h| *h == "p").ok_or_else(|| CoreError::Parse {
                line: 1,
                column: 1,
                message: "header has no `p` column".into(),
            })?;
            lines.next();
        }
    }
    lines
        .map(|(i, line)| {
            let cell = line.split(['\t', ',']).nth(column).unwrap_or("").trim();
            match cell.parse::<f64>() {
                Ok(p) if (0.0..=1.0).contains(&p) => Ok(p),
                _ => Err(CoreError::Parse {
                    line: i + 1,
                    column: column + 1,
                    message: format!("`{cell}` is not a p-value in [0, 1]"),
                }
                .into()),
            }
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<(), GatewayError> {
    match cli.command {
        Command::Import { input, out } => {
            let mut session = input.inputs(None)?.session()?;
            apply_all(&mut session, &input.prefix())?;
            emit(&out, &session.current().to_delimited('\t'))
        }
        Command::Pca {
            input,
            keep,
            mode,
            top_variance,
            trials,
            seed,
            out,
        } => {
            let mut steps = input.prefix();
            steps.extend(top_variance.map(|keep| Step::VarianceFilter { keep }));
            steps.push(Step::Pca {
                components: keep,
                mode: match mode {
                    ModeArg::Correlation => PcaMode::Correlation,
                    ModeArg::Covariance => PcaMode::Covariance,
                    ModeArg::Raw => PcaMode::Raw,
                },
                trials,
                seed,
            });
            let (_, artifact) = run_steps(input.inputs(None)?, steps)?;
            emit(&out, &to_json(&artifact)?)
        }
        Command::Isomap {
            input,
            k,
            dims,
            largest_component,
            out,
        } => {
            let mut steps = input.prefix();
            steps.push(Step::Isomap {
                k,
                dims,
                disconnected: if largest_component {
                    Disconnection::LargestComponent
                } else {
                    Disconnection::Fail
                },
            });
            let (_, artifact) = run_steps(input.inputs(None)?, steps)?;
            emit(&out, &to_json(&artifact)?)
        }
        Command::Ttest {
            input,
            annotations,
            factor,
            level_a,
            level_b,
            alpha,
            welch,
            permutations,
            seed,
            out,
        } => {
            let mut steps = input.prefix();
            steps.push(Step::TTest {
                factor,
                a: level_a,
                b: level_b,
                alpha,
                variant: if welch { Variant::Welch } else { Variant::Pooled },
                permutations,
                null_trials: DEFAULT_TRIALS,
                seed,
            });
            let (session, _) = run_steps(input.inputs(Some(&annotations))?, steps)?;
            let result = session.latest_test().expect("t-test step just applied");
            emit(&out, &result.table.to_delimited())
        }
        Command::Qvalues { input, alpha, out } => {
            let p = parse_p_values(&read_text(&input)?)?;
            let q = q_values(&p);
            let mut text = String::from(if alpha.is_some() { "p\tq\trejected\n" } else { "p\tq\n" });
            let rejected = match alpha {
                Some(a) if !(a > 0.0 && a < 1.0) => {
                    return Err(CoreError::InvalidParameter(format!("significance level must lie in (0, 1), got {a}")).into())
                }
                Some(a) => {
                    let mut flags = vec![false; p.len()];
                    bh_reject(&p, a).into_iter().for_each(|i| flags[i] = true);
                    Some(flags)
                }
                None => None,
            };
            for i in 0..p.len() {
                text.push_str(&format!("{:e}\t{:e}", p[i], q[i]));
                if let Some(flags) = &rejected {
                    text.push_str(&format!("\t{}", flags[i]));
                }
                text.push('\n');
            }
            emit(&out, &text)
        }
        Command::Null {
            p,
            n,
            components,
            conditioning,
            trials,
            seed,
            out,
        } => {
            let spec = dualview_core::nulls::NullSpec {
                p,
                n,
                conditioning: match conditioning {
                    ConditioningArg::Raw => Conditioning::Raw,
                    ConditioningArg::Centered => Conditioning::Centered,
                    ConditioningArg::Standardized => Conditioning::Standardized,
                },
                trials,
                seed,
            };
            let s = IndexSet::leading(components)?;
            let estimate = dualview_core::nulls::expected_projection_content(&spec, &s)?;
            emit(
                &out,
                &to_json(&serde_json::json!({ "spec": spec, "components": s, "estimate": estimate }))?,
            )
        }
        Command::Session {
            command: SessionCommand::Run { script, out },
        } => {
            let (script, dir) = SessionScript::load(&script)?;
            let session = script.run(&dir)?;
            emit(&out, &(session.export_json()? + "\n"))
        }
        Command::Export {
            session,
            what,
            components,
            out,
        } => {
            let session = Session::import_json(&read_text(&session)?)?;
            let text = match what {
                ExportWhat::Session => session.export_json()? + "\n",
                ExportWhat::Matrix => session.current().to_delimited('\t'),
                ExportWhat::Tests => session
                    .latest_test()
                    .ok_or_else(|| CoreError::Session("the session has no t-test step".into()))?
                    .table
                    .to_delimited(),
                ExportWhat::Biplot => to_json(&session.biplot(&IndexSet::parse(&components)?)?)?,
            };
            emit(&out, &text)
        }
        Command::Serve { port, host, data_dir } => {
            let config = ServeConfig { host, port, data_dir };
            let runtime = tokio::runtime::Runtime::new().map_err(|source| GatewayError::Io {
                path: PathBuf::from("<runtime>"),
                source,
            })?;
            runtime.block_on(server::serve(config))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_value_lists() {
        assert_eq!(parse_p_values("0.1\n0.5\n\n1\n").unwrap(), vec![0.1, 0.5, 1.0]);
        assert_eq!(parse_p_values("id\tp\na\t0.2\nb\t0.3\n").unwrap(), vec![0.2, 0.3]);
        assert!(parse_p_values("0.1\n1.5\n").is_err());
        assert!(parse_p_values("id\tq\na\t0.2\n").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
