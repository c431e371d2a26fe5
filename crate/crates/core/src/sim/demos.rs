use std::collections::BTreeMap;

use crate::data::{Episode, Observation, Step};

use super::world::TaskFamily;
use super::{reset, scripted_expert, SimConfig, SimError};

/// Actions whose largest component is below this count as idle holds.
pub const IDLE_NORM: f64 = 1e-6;

/// Drops trailing idle-hold steps; never empties the episode.
pub fn trim_idle_tail(episode: &mut Episode) {
    while episode.steps.len() > 1
        && episode
            .steps
            .last()
            .is_some_and(|s| s.action.max_abs() < IDLE_NORM)
    {
        episode.steps.pop();
    }
}

/// Expert demonstrations, cycling through `families`. Episode `i` uses world
/// seed `seed * 100_003 + i`. Unsuccessful rollouts are dropped.
pub fn generate_demonstrations(
    n: usize,
    families: &[TaskFamily],
    seed: u64,
    cfg: &SimConfig,
) -> Result<Vec<Episode>, SimError> {
    if families.is_empty() {
        return Err(SimError::Config("no task families given".into()));
    }
    let mut episodes = Vec::with_capacity(n);
    for i in 0..n {
        let family = families[i % families.len()];
        let world_seed = seed.wrapping_mul(100_003).wrapping_add(i as u64);
        let (mut world, task) = reset(family, world_seed, cfg)?;
        let instruction = task.instruction();
        let mut steps = Vec::new();
        for _ in 0..cfg.max_steps {
            if world.is_success(&task) {
                break;
            }
            let action = scripted_expert(&world, &task)?;
            steps.push(Step {
                observation: Observation {
                    images: world.render_views(cfg.views),
                    instruction: instruction.clone(),
                },
                action,
                trace: None,
            });
            world = world.step(&action);
        }
        if !world.is_success(&task) || steps.is_empty() {
            continue;
        }
        let mut episode = Episode {
            episode_id: format!("ep{i:05}"),
            task_name: family.name().to_string(),
            steps,
            metadata: BTreeMap::from([
                ("seed".to_string(), world_seed.to_string()),
                ("source".to_string(), "scripted_expert".to_string()),
                ("grid_size".to_string(), cfg.grid_size.to_string()),
            ]),
        };
        trim_idle_tail(&mut episode);
        episodes.push(episode);
    }
    Ok(episodes)
}
