use crate::analysis::TrialMetrics;
use crate::management::{AssignmentStrategy, Registry, RegistryError};

use super::{onboarding_check, participant_id, participant_rng, plan_participant, SimAgentConfig};

/// Trial metrics a cohort would produce, computed from the same participant
/// plans the HTTP simulation streams. Participants are assigned in index
/// order with the balanced strategy; those failing onboarding contribute
/// nothing and dropouts contribute the trials they attempted. Observations
/// are taken in participant order until `n_obs` trials are collected, so the
/// last participant may be cut short.
pub fn synthetic_metrics(
    cfg: &SimAgentConfig,
    treatments: &[String],
    trials: u32,
    n_obs: usize,
) -> Result<Vec<TrialMetrics>, RegistryError> {
    let registry = Registry::in_memory(treatments.to_vec(), AssignmentStrategy::Balanced, cfg.seed);
    let mut out = Vec::with_capacity(n_obs);
    let mut index = 0u64;
    while out.len() < n_obs {
        let pid = participant_id(cfg.seed, index);
        let rec = registry.assign(&pid, &format!("s-{pid}"), 0)?;
        let mut rng = participant_rng(cfg.seed, index);
        let plan = plan_participant(cfg, &rec.treatment, trials, &mut rng);
        index += 1;
        if onboarding_check(&plan.profile).is_err() {
            continue;
        }
        let attempted = plan.dropout_after.unwrap_or(trials) as usize;
        for (k, samples) in plan.trajectories.iter().take(attempted).enumerate() {
            if out.len() == n_obs {
                break;
            }
            out.push(TrialMetrics::from_samples(
                &pid,
                &rec.treatment,
                k as u32 + 1,
                samples,
            ));
        }
    }
    Ok(out)
}
