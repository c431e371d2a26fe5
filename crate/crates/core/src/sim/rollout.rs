use serde::Serialize;

use crate::data::{ContinuousAction, Observation};

use super::world::TaskFamily;
use super::{reset, SimConfig, SimError};

/// Closed-loop controller: rendered observation in, action out.
pub trait Policy {
    fn act(&mut self, observation: &Observation) -> Result<ContinuousAction, String>;
}

impl<F> Policy for F
where
    F: FnMut(&Observation) -> Result<ContinuousAction, String>,
{
    fn act(&mut self, observation: &Observation) -> Result<ContinuousAction, String> {
        self(observation)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutResult {
    pub success: bool,
    pub steps_taken: usize,
    /// The task object (or the drawer handle) was held at least once.
    pub grasped: bool,
    pub trajectory: Vec<(u64, ContinuousAction)>,
    /// Set when the policy returned an error; the episode counts as failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RolloutSummary {
    pub family: String,
    pub n: usize,
    pub success_rate: f64,
    pub grasp_rate: f64,
    pub seed: u64,
    #[serde(skip)]
    pub results: Vec<RolloutResult>,
}

pub fn derive_episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64).wrapping_add(0x5EED)
}

/// Runs `n_episodes` closed-loop episodes: render, act, step, until success
/// or `cfg.max_steps` actions.
pub fn rollout(
    policy: &mut dyn Policy,
    family: TaskFamily,
    n_episodes: usize,
    seed: u64,
    cfg: &SimConfig,
) -> Result<RolloutSummary, SimError> {
    let mut results = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let (mut world, task) = reset(family, derive_episode_seed(seed, i), cfg)?;
        let instruction = task.instruction();
        let mut grasped = false;
        let mut trajectory = Vec::new();
        let mut error = None;
        while trajectory.len() < cfg.max_steps && !world.is_success(&task) {
            let obs = Observation {
                images: world.render_views(cfg.views),
                instruction: instruction.clone(),
            };
            let action = match policy.act(&obs) {
                Ok(a) => a,
                Err(e) => {
                    error = Some(e);
                    break;
                }
            };
            trajectory.push((world.digest(), action));
            world = world.step(&action);
            grasped |= if family.uses_drawer() {
                world.grasping_handle()
            } else {
                world.object(&task.source).is_some_and(|o| o.held)
            };
        }
        results.push(RolloutResult {
            success: error.is_none() && world.is_success(&task),
            steps_taken: trajectory.len(),
            grasped,
            trajectory,
            error,
        });
    }
    let n = results.len().max(1) as f64;
    Ok(RolloutSummary {
        family: family.name().to_string(),
        n: n_episodes,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        grasp_rate: results.iter().filter(|r| r.grasped).count() as f64 / n,
        seed,
        results,
    })
}
