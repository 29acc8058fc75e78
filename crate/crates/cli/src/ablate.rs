//! Grids of branch configurations: every (config, γ, seed) cell is trained
//! on the seen suite of its seed and scored on both splits.

use std::fmt::Write as _;

use mba_core::agent::{BranchConfig, Policy, Scope, Slot};
use mba_core::metrics::Summary;
use rayon::prelude::*;

use crate::args::{AblateArgs, Split};
use crate::error::{CliError, Result};
use crate::run::{evaluate_suite, parse_branches, train_suite, RunSpec};
use crate::suite::{Suite, SuiteParams};

pub const GRID_HEADER: &str = "config,gamma,seed,split,SR,SPL,RGS,RGSPL,status";

#[derive(Clone, Debug)]
pub struct Cell {
    pub config: BranchConfig,
    pub gamma: f64,
    pub seed: u64,
    /// Seen and unseen summaries, or why the cell failed.
    pub outcome: std::result::Result<(Summary, Summary), String>,
}

/// The three suites of one seed.
pub struct SeedData {
    pub train: Suite,
    pub seen: Suite,
    pub unseen: Suite,
}

pub fn seed_data(args: &AblateArgs, seed: u64) -> Result<SeedData> {
    let seen_params = |episodes, first| SuiteParams::new(&args.world, Split::Seen, seed, args.worlds, episodes, first);
    Ok(SeedData {
        train: Suite::generate(&seen_params(args.episodes, 0))?,
        seen: Suite::generate(&seen_params(args.eval_episodes, args.episodes as u64))?,
        unseen: Suite::generate(&SuiteParams::new(&args.world, Split::Unseen, seed, args.unseen_worlds, args.eval_episodes, 0))?,
    })
}

fn parse_list<T>(text: &str, sep: char, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let items: Vec<T> = text
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s).ok_or_else(|| CliError::Usage(format!("bad {what} `{s}`"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("empty list of {what}s")));
    }
    Ok(items)
}

/// Explicit configs first, then the ancillary grid over `g:og,l:og`, global
/// specs outermost; duplicates keep their first position.
pub fn grid_configs(args: &AblateArgs) -> Result<Vec<BranchConfig>> {
    let mut out: Vec<BranchConfig> = Vec::new();
    if let Some(list) = &args.configs {
        for text in list.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            out.push(parse_branches(text)?);
        }
    }
    if args.globals.is_some() || args.locals.is_some() {
        let specs = |list: &Option<String>| -> Result<Vec<String>> {
            parse_list(list.as_deref().unwrap_or("-"), ',', "ancillary spec", |s| Some(s.to_string()))
        };
        for g in specs(&args.globals)? {
            for l in specs(&args.locals)? {
                let tok = |scope: &str, s: &str| if s == "-" { "-".to_string() } else { format!("{scope}:{s}") };
                out.push(parse_branches(&format!("g:og,l:og,{},{}", tok("g", &g), tok("l", &l)))?);
            }
        }
    }
    if out.is_empty() {
        out.push(BranchConfig::baseline());
    }
    let mut unique: Vec<BranchConfig> = Vec::new();
    for c in out {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    Ok(unique)
}

pub fn seeds(args: &AblateArgs) -> Result<Vec<u64>> {
    match &args.seeds {
        Some(list) => parse_list(list, ',', "seed", |s| s.parse().ok()),
        None => Ok(vec![args.common.seed]),
    }
}

pub fn gammas(args: &AblateArgs) -> Result<Vec<f64>> {
    let gs = parse_list(&args.gammas, ',', "gamma", |s| s.parse::<f64>().ok())?;
    if let Some(g) = gs.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(CliError::Usage(format!("gamma must lie in [0, 1], got {g}")));
    }
    Ok(gs)
}

/// Runs every cell. Cells are independent; results come back ordered by
/// (config, γ, seed) whatever the scheduling.
pub fn run_grid(args: &AblateArgs) -> Result<Vec<Cell>> {
    let configs = grid_configs(args)?;
    let gammas = gammas(args)?;
    let seeds = seeds(args)?;
    let data: Vec<SeedData> = seeds.iter().map(|&s| seed_data(args, s)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for config in &configs {
        for &gamma in &gammas {
            for (k, &seed) in seeds.iter().enumerate() {
                jobs.push((config.clone(), gamma, seed, k));
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(config, gamma, seed, k)| {
            let outcome = run_cell(args, &config, gamma, seed, &data[k]).map_err(|e| e.to_string());
            Cell { config, gamma, seed, outcome }
        })
        .collect())
}

fn run_cell(args: &AblateArgs, config: &BranchConfig, gamma: f64, seed: u64, data: &SeedData) -> Result<(Summary, Summary)> {
    let spec = RunSpec::new(config.clone(), gamma, seed, &args.model, &args.optim);
    let trained = train_suite(&data.train, &spec)?;
    let seen = evaluate_suite(&trained.agent, &data.seen, Policy::Greedy, false)?;
    let unseen = evaluate_suite(&trained.agent, &data.unseen, Policy::Greedy, false)?;
    Ok((seen.summary, unseen.summary))
}

/// Quotes a CSV field when it holds a delimiter, quote or line break.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn grid_csv(cells: &[Cell]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for c in cells {
        let config = csv_field(&c.config.to_string());
        for split in ["seen", "unseen"] {
            let _ = match &c.outcome {
                Ok((seen, unseen)) => {
                    let s = if split == "seen" { seen } else { unseen };
                    writeln!(
                        out,
                        "{config},{:.6},{},{split},{:.6},{:.6},{:.6},{:.6},ok",
                        c.gamma, c.seed, s.sr, s.spl, s.rgs, s.rgspl
                    )
                }
                Err(msg) => writeln!(
                    out,
                    "{config},{:.6},{},{split},,,,,{}",
                    c.gamma,
                    c.seed,
                    csv_field(&format!("failed: {}", msg.replace(['\n', '\r'], " ")))
                ),
            };
        }
    }
    out
}

/// Row or column label of a config: the specs in its slots of one scope,
/// base first, joined by `+`; `none` when the scope is empty.
pub fn scope_label(config: &BranchConfig, scope: Scope) -> String {
    let slots = match scope {
        Scope::Global => [Slot::GlobalBase, Slot::GlobalAncillary],
        Scope::Local => [Slot::LocalBase, Slot::LocalAncillary],
    };
    let specs: Vec<String> = slots.iter().filter_map(|&s| config.spec(s)).map(|s| s.compact()).collect();
    if specs.is_empty() {
        "none".into()
    } else {
        specs.join("+")
    }
}

/// Mean SPL over the successful seeds of each cell, one block of rows per
/// (split, γ): rows are global-slot labels and columns local-slot labels.
pub fn spl_matrix_csv(cells: &[Cell]) -> String {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut gammas: Vec<f64> = Vec::new();
    for c in cells {
        let (r, l) = (scope_label(&c.config, Scope::Global), scope_label(&c.config, Scope::Local));
        if !rows.contains(&r) {
            rows.push(r);
        }
        if !cols.contains(&l) {
            cols.push(l);
        }
        if !gammas.contains(&c.gamma) {
            gammas.push(c.gamma);
        }
    }
    let mut out = String::from("split,gamma,global");
    for l in &cols {
        out.push(',');
        out.push_str(&csv_field(l));
    }
    out.push('\n');
    for split in ["seen", "unseen"] {
        for &gamma in &gammas {
            for r in &rows {
                let _ = write!(out, "{split},{gamma:.6},{}", csv_field(r));
                for l in &cols {
                    let spls: Vec<f64> = cells
                        .iter()
                        .filter(|c| {
                            c.gamma == gamma
                                && scope_label(&c.config, Scope::Global) == *r
                                && scope_label(&c.config, Scope::Local) == *l
                        })
                        .filter_map(|c| c.outcome.as_ref().ok())
                        .map(|(seen, unseen)| if split == "seen" { seen.spl } else { unseen.spl })
                        .collect();
                    if spls.is_empty() {
                        out.push(',');
                    } else {
                        let _ = write!(out, ",{:.6}", spls.iter().sum::<f64>() / spls.len() as f64);
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}
