use std::fmt;
use std::str::FromStr;

use crate::error::{MbaError, Result};
use crate::features::PerturbationSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// The dual-branch baseline pair.
    Base,
    /// Extra branches added on top of the baseline.
    Ancillary,
}

/// The four branch slots, in the order the branch-weight network concatenates
/// their state tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    LocalBase,
    GlobalBase,
    LocalAncillary,
    GlobalAncillary,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::LocalBase, Slot::GlobalBase, Slot::LocalAncillary, Slot::GlobalAncillary];

    pub fn scope(self) -> Scope {
        match self {
            Slot::LocalBase | Slot::LocalAncillary => Scope::Local,
            Slot::GlobalBase | Slot::GlobalAncillary => Scope::Global,
        }
    }

    pub fn role(self) -> Role {
        match self {
            Slot::LocalBase | Slot::GlobalBase => Role::Base,
            Slot::LocalAncillary | Slot::GlobalAncillary => Role::Ancillary,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Slot::LocalBase => "local_a",
            Slot::GlobalBase => "global_a",
            Slot::LocalAncillary => "local_b",
            Slot::GlobalAncillary => "global_b",
        }
    }

    /// Slot at position `i` of the textual form `g_a,l_a,g_b,l_b`.
    fn from_text_position(i: usize) -> Option<Slot> {
        [Slot::GlobalBase, Slot::LocalBase, Slot::GlobalAncillary, Slot::LocalAncillary].get(i).copied()
    }
}

/// Which branches exist and what each one sees.
///
/// Textual form: up to four comma-separated tokens in the order
/// `global base, local base, global ancillary, local ancillary`; each token
/// is `g:<spec>` / `l:<spec>` or `-` for an omitted slot, e.g.
/// `g:og,l:og,g:pv0.5,l:pv0.5` or `g:og,-`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    specs: [Option<PerturbationSpec>; 4],
}

impl BranchConfig {
    pub fn new(specs: impl IntoIterator<Item = (Slot, PerturbationSpec)>) -> Result<Self> {
        let mut out = [None; 4];
        for (slot, spec) in specs {
            let i = slot as usize;
            if out[i].is_some() {
                return Err(MbaError::Configuration(format!("slot {} given twice", slot.label())));
            }
            out[i] = Some(spec);
        }
        let cfg = Self { specs: out };
        if cfg.len() == 0 {
            return Err(MbaError::Configuration("a branch config needs at least one branch".into()));
        }
        Ok(cfg)
    }

    /// The dual-branch baseline `g:og,l:og`.
    pub fn baseline() -> Self {
        Self::new([(Slot::GlobalBase, PerturbationSpec::Original), (Slot::LocalBase, PerturbationSpec::Original)])
            .expect("two branches")
    }

    pub fn spec(&self, slot: Slot) -> Option<PerturbationSpec> {
        self.specs[slot as usize]
    }

    /// Active slots in weight-network order.
    pub fn slots(&self) -> Vec<Slot> {
        Slot::ALL.into_iter().filter(|s| self.specs[*s as usize].is_some()).collect()
    }

    pub fn len(&self) -> usize {
        self.specs.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_scope(&self, scope: Scope) -> bool {
        self.slots().iter().any(|s| s.scope() == scope)
    }

    /// Resolves `pv` without an explicit γ to `gamma`.
    pub fn with_default_gamma(&self, gamma: f64) -> Self {
        let mut specs = self.specs;
        for s in specs.iter_mut().flatten() {
            *s = s.with_default_gamma(gamma);
        }
        Self { specs }
    }

    pub fn uses_depth(&self) -> bool {
        self.specs.iter().flatten().any(|s| *s == PerturbationSpec::Depth)
    }
}

impl fmt::Display for BranchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = (0..4)
            .rev()
            .find(|&i| self.spec(Slot::from_text_position(i).unwrap()).is_some())
            .unwrap_or(0);
        // keep at least two tokens so a lone branch still shows which side it sits on
        let last = last.max(1);
        let tokens: Vec<String> = (0..=last)
            .map(|i| {
                let slot = Slot::from_text_position(i).unwrap();
                match self.spec(slot) {
                    Some(spec) => {
                        let scope = if slot.scope() == Scope::Global { "g" } else { "l" };
                        format!("{scope}:{}", spec.compact())
                    }
                    None => "-".to_string(),
                }
            })
            .collect();
        write!(f, "{}", tokens.join(","))
    }
}

impl FromStr for BranchConfig {
    type Err = MbaError;

    fn from_str(s: &str) -> Result<Self> {
        let tokens: Vec<&str> = s.split(',').map(str::trim).collect();
        if tokens.len() > 4 {
            return Err(MbaError::Configuration(format!("at most four branch slots, got `{s}`")));
        }
        let mut specs = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            let slot = Slot::from_text_position(i).expect("at most four tokens");
            if *tok == "-" || tok.is_empty() {
                continue;
            }
            let (scope, spec) = tok
                .split_once(':')
                .ok_or_else(|| MbaError::Configuration(format!("branch token `{tok}` is not scope:spec")))?;
            let expected = if slot.scope() == Scope::Global { "g" } else { "l" };
            if scope != expected {
                return Err(MbaError::Configuration(format!(
                    "token {} of `{s}` must be a `{expected}:` branch, got `{tok}`",
                    i + 1
                )));
            }
            if spec == "none" {
                continue;
            }
            specs.push((slot, spec.parse::<PerturbationSpec>()?));
        }
        Self::new(specs)
    }
}

/// Layer sizes and initialization of an agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub branches: BranchConfig,
    pub feature_dim: usize,
    pub depth_dim: usize,
    pub instruction_dim: usize,
    pub object_dim: usize,
    pub hidden_dim: usize,
    pub ffn_hidden: usize,
    /// Ancillary branches reuse the weights of the base branch of the same
    /// scope (depth projections stay per slot).
    pub share_branch_params: bool,
    pub init_seed: u64,
}

impl AgentConfig {
    pub fn new(branches: BranchConfig) -> Self {
        Self {
            branches,
            feature_dim: 64,
            depth_dim: 16,
            instruction_dim: 64,
            object_dim: 16,
            hidden_dim: 64,
            ffn_hidden: 128,
            share_branch_params: false,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.instruction_dim, self.object_dim, self.hidden_dim, self.ffn_hidden];
        if dims.contains(&0) {
            return Err(MbaError::Configuration("all layer sizes must be positive".into()));
        }
        if self.branches.uses_depth() && (self.depth_dim == 0 || self.depth_dim >= self.feature_dim) {
            return Err(MbaError::Configuration("depth dim must be positive and below the feature dim".into()));
        }
        Ok(())
    }
}
