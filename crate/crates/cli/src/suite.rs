//! A suite is a set of worlds, each with its own episodes, stored as
//! `world_NNN.json` and `episodes_NNN.jsonl` pairs in one directory.

use std::fs;
use std::path::Path;

use mba_core::agent::Scene;
use mba_core::world::{generate_world, make_episode_from_pairs, valid_episode_pairs, Episode, EpisodeParams, WorldGraph, WorldParams};

use crate::args::{Split, WorldArgs};
use crate::error::{io_at, CliError, Result};

/// World seeds of one base seed span this many values.
const SEED_STRIDE: u64 = 1000;
/// Start of the unseen world seed range; seen seeds stay below it.
const UNSEEN_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug)]
pub struct SuiteParams {
    pub world: WorldParams,
    pub episode: EpisodeParams,
    pub split: Split,
    pub seed: u64,
    pub worlds: usize,
    pub episodes: usize,
    pub first_episode: u64,
}

impl SuiteParams {
    pub fn new(args: &WorldArgs, split: Split, seed: u64, worlds: usize, episodes: usize, first_episode: u64) -> Self {
        let world = WorldParams {
            nodes: args.nodes,
            k_views: args.k_views,
            max_objects: args.max_objects,
            feature_dim: args.feature_dim,
            object_dim: args.object_dim,
            radius: args.radius,
            box_size: args.box_size,
            z_jitter: args.z_jitter,
        };
        let episode = EpisodeParams {
            instruction_dim: args.instruction_dim,
            noise_std: args.noise,
            min_hops: args.min_hops,
            min_distance: args.min_distance,
            max_steps: args.max_steps,
        };
        Self { world, episode, split, seed, worlds, episodes, first_episode }
    }

    /// Seed of world `i`. Seen suites draw from `[0, 10^6)` and unseen ones
    /// from `[10^6, 2·10^6)`, so the two never share a world.
    pub fn world_seed(&self, i: usize) -> u64 {
        let base = self.seed * SEED_STRIDE + i as u64;
        match self.split {
            Split::Seen => base,
            Split::Unseen => UNSEEN_OFFSET + base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed >= UNSEEN_OFFSET / SEED_STRIDE {
            return Err(CliError::Usage(format!("seed must be below {}, got {}", UNSEEN_OFFSET / SEED_STRIDE, self.seed)));
        }
        if self.worlds == 0 || self.worlds as u64 > SEED_STRIDE {
            return Err(CliError::Usage(format!("worlds must lie in 1..={SEED_STRIDE}, got {}", self.worlds)));
        }
        if self.episodes == 0 {
            return Err(CliError::Usage("episodes per world must be positive".into()));
        }
        self.world.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub worlds: Vec<WorldGraph>,
    /// `episodes[i]` belong to `worlds[i]`.
    pub episodes: Vec<Vec<Episode>>,
}

impl Suite {
    pub fn generate(params: &SuiteParams) -> Result<Self> {
        params.validate()?;
        let mut worlds = Vec::with_capacity(params.worlds);
        let mut episodes = Vec::with_capacity(params.worlds);
        for i in 0..params.worlds {
            let g = generate_world(params.world_seed(i), &params.world)?;
            let pairs = valid_episode_pairs(&g, &params.episode);
            let eps = (0..params.episodes as u64)
                .map(|j| make_episode_from_pairs(&g, &pairs, params.first_episode + j, &params.episode))
                .collect::<mba_core::Result<Vec<_>>>()?;
            worlds.push(g);
            episodes.push(eps);
        }
        Ok(Self { worlds, episodes })
    }

    pub fn len(&self) -> usize {
        self.worlds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.worlds.is_empty()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    /// `(world index, episode)` in file order.
    pub fn iter_episodes(&self) -> impl Iterator<Item = (usize, &Episode)> {
        self.episodes.iter().enumerate().flat_map(|(i, eps)| eps.iter().map(move |e| (i, e)))
    }

    pub fn feature_dim(&self) -> usize {
        self.worlds[0].feature_dim()
    }

    pub fn object_dim(&self) -> usize {
        self.worlds[0].object_dim()
    }

    pub fn instruction_dim(&self) -> usize {
        self.iter_episodes().next().map_or(0, |(_, e)| e.instruction.len())
    }

    /// Scenes with depth features precomputed when `depth_dim` is given.
    pub fn scenes(&self, depth_dim: Option<usize>) -> Result<Vec<Scene>> {
        self.worlds
            .iter()
            .map(|g| {
                let scene = Scene::new(g.clone())?;
                Ok(match depth_dim {
                    Some(d) => scene.with_depth(d)?,
                    None => scene,
                })
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        for (i, (g, eps)) in self.worlds.iter().zip(&self.episodes).enumerate() {
            let path = dir.join(world_file(i));
            fs::write(&path, g.to_json()? + "\n").map_err(io_at(&path))?;
            let mut lines = String::new();
            for e in eps {
                lines.push_str(&e.to_json_line()?);
                lines.push('\n');
            }
            let path = dir.join(episode_file(i));
            fs::write(&path, lines).map_err(io_at(&path))?;
        }
        Ok(())
    }

    /// Reads `world_000.json`, `world_001.json`, ... until the first gap.
    pub fn read(dir: &Path) -> Result<Self> {
        let mut worlds = Vec::new();
        let mut episodes = Vec::new();
        loop {
            let i = worlds.len();
            let path = dir.join(world_file(i));
            if !path.exists() {
                break;
            }
            let text = fs::read_to_string(&path).map_err(io_at(&path))?;
            let g = WorldGraph::from_json(&text)?;
            let path = dir.join(episode_file(i));
            let text = fs::read_to_string(&path).map_err(io_at(&path))?;
            let eps = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(Episode::from_json_line)
                .collect::<mba_core::Result<Vec<_>>>()?;
            for e in &eps {
                if e.start >= g.len() || e.goal >= g.len() {
                    return Err(CliError::Usage(format!("{}: episode {} leaves the world", path.display(), e.episode_id)));
                }
            }
            worlds.push(g);
            episodes.push(eps);
        }
        let suite = Self { worlds, episodes };
        suite.check()?;
        Ok(suite)
    }

    /// Every world shares feature sizes and every instruction has one length.
    fn check(&self) -> Result<()> {
        if self.is_empty() || self.episode_count() == 0 {
            return Err(CliError::Usage("suite holds no worlds or no episodes".into()));
        }
        let (f, o, w) = (self.feature_dim(), self.object_dim(), self.instruction_dim());
        if self.worlds.iter().any(|g| g.feature_dim() != f || g.object_dim() != o) {
            return Err(CliError::Usage("worlds in one suite must share feature sizes".into()));
        }
        if self.iter_episodes().any(|(_, e)| e.instruction.len() != w) {
            return Err(CliError::Usage("instructions in one suite must share a length".into()));
        }
        Ok(())
    }
}

fn world_file(i: usize) -> String {
    format!("world_{i:03}.json")
}

fn episode_file(i: usize) -> String {
    format!("episodes_{i:03}.jsonl")
}
