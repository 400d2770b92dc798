use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::management::funnel::MONITORING_EXCERPT;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityProfile {
    pub os: String,
    pub browser: String,
    pub webgl_capable: bool,
    pub frame_rate_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnboardingFailure {
    Webgl,
    FrameRate,
}

impl OnboardingFailure {
    pub fn as_str(self) -> &'static str {
        match self {
            OnboardingFailure::Webgl => "webgl",
            OnboardingFailure::FrameRate => "frame_rate",
        }
    }
}

pub fn onboarding_check(p: &CapabilityProfile) -> Result<(), OnboardingFailure> {
    if !p.webgl_capable {
        Err(OnboardingFailure::Webgl)
    } else if !p.frame_rate_ok {
        Err(OnboardingFailure::FrameRate)
    } else {
        Ok(())
    }
}

fn pick_cell<R: Rng + ?Sized>(
    rng: &mut R,
    weight: impl Fn(u64, u64) -> u64,
) -> (&'static str, &'static str) {
    let total: u64 = MONITORING_EXCERPT.iter().map(|c| weight(c.2, c.3)).sum();
    let mut x = rng.random_range(0..total);
    for (os, browser, ok, failed) in MONITORING_EXCERPT {
        let w = weight(ok, failed);
        if x < w {
            return (os, browser);
        }
        x -= w;
    }
    unreachable!("weights sum to total")
}

/// Draws pass/fail with probability `pass_p`, then an (os, browser) cell in
/// proportion to the excerpt's succeeded or failed counts. With
/// `pass_p` = 316/462 the joint distribution equals the excerpt's.
pub fn sample_profile<R: Rng + ?Sized>(pass_p: f64, rng: &mut R) -> CapabilityProfile {
    let pass = rng.random_bool(pass_p.clamp(0.0, 1.0));
    let (os, browser) = if pass {
        pick_cell(rng, |ok, _| ok)
    } else {
        pick_cell(rng, |_, failed| failed)
    };
    let (webgl_capable, frame_rate_ok) = if pass {
        (true, true)
    } else if rng.random_bool(0.5) {
        (false, true)
    } else {
        (true, false)
    };
    CapabilityProfile {
        os: os.to_string(),
        browser: browser.to_string(),
        webgl_capable,
        frame_rate_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(webgl: bool, fps: bool) -> CapabilityProfile {
        CapabilityProfile {
            os: "Linux".into(),
            browser: "Chrome".into(),
            webgl_capable: webgl,
            frame_rate_ok: fps,
        }
    }

    #[test]
    fn check_requires_both_flags() {
        assert_eq!(onboarding_check(&profile(true, true)), Ok(()));
        assert_eq!(
            onboarding_check(&profile(false, true)),
            Err(OnboardingFailure::Webgl)
        );
        assert_eq!(
            onboarding_check(&profile(true, false)),
            Err(OnboardingFailure::FrameRate)
        );
    }

    #[test]
    fn failures_only_in_failed_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let p = sample_profile(0.5, &mut rng);
            if onboarding_check(&p).is_err() {
                assert_eq!(p.browser, "Chrome");
                assert_ne!(p.os, "Chrome OS");
            }
        }
    }

    #[test]
    fn excerpt_split_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 462 * 200;
        let passed = (0..n)
            .filter(|_| onboarding_check(&sample_profile(316.0 / 462.0, &mut rng)).is_ok())
            .count();
        let mean_per_462 = passed as f64 / 200.0;
        // sd of the mean over 200 cohorts is about 0.7
        assert!((mean_per_462 - 316.0).abs() < 3.0, "{mean_per_462}");
    }
}
