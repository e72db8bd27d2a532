//! Goal elicitation: turn a user's accuracy-and-budget request into a goal
//! predicate over beliefs plus a cost horizon.

use thiserror::Error;

use crate::prims::Registry;

#[derive(Debug, Error, PartialEq)]
pub enum GoalError {
    #[error("target accuracy must be in (0.5, 1], got {0}")]
    EpsilonOutOfRange(f64),
    #[error("budget of {budget} cents cannot pay for any primitive (cheapest costs {cheapest})")]
    BudgetTooSmall { budget: f64, cheapest: f64 },
}

/// Requested text quality, mapped onto the hidden quality scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Satisfactory,
    Excellent,
    AlmostPerfect,
}

impl Tier {
    pub fn quality_threshold(self) -> f64 {
        match self {
            Tier::Satisfactory => 0.6,
            Tier::Excellent => 0.8,
            Tier::AlmostPerfect => 0.9,
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = String;
    fn from_str(s: &str) -> Result<Tier, String> {
        match s.to_ascii_lowercase().as_str() {
            "satisfactory" => Ok(Tier::Satisfactory),
            "excellent" => Ok(Tier::Excellent),
            "almost-perfect" | "almostperfect" => Ok(Tier::AlmostPerfect),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GoalKind {
    /// No elicited goal: minimize expected cost to Stop.
    CostOnly,
    /// The belief probability that the returned boolean answer is correct
    /// must reach `epsilon`.
    AnswerAccuracy { epsilon: f64 },
    /// The belief probability that the returned artifact's hidden quality is
    /// at least `q_star` must reach `epsilon`.
    QualityTier { q_star: f64, epsilon: f64 },
    /// The entry argument at `arg` (a task list) must be empty on return.
    SampleAll { arg: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSpec {
    pub kind: GoalKind,
    /// Budget: maximum cumulative cost in cents before the program is forced
    /// onto its cheapest path to Stop.
    pub horizon_cents: f64,
    /// Charged at termination when the goal predicate fails.
    pub fail_penalty_cents: f64,
}

impl GoalSpec {
    pub fn cost_only(budget_cents: Option<f64>) -> GoalSpec {
        GoalSpec {
            kind: GoalKind::CostOnly,
            horizon_cents: budget_cents.unwrap_or(f64::INFINITY),
            fail_penalty_cents: 0.0,
        }
    }

    /// Goal for task-list programs like rocksample: finish only after every
    /// task has been processed.
    pub fn sample_all(arg: usize, budget_cents: f64) -> GoalSpec {
        GoalSpec {
            kind: GoalKind::SampleAll { arg },
            horizon_cents: budget_cents,
            fail_penalty_cents: 10.0 * budget_cents,
        }
    }
}

/// A goal request as a user would state it.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalRequest {
    AnswerAccuracy { epsilon: f64, budget_cents: f64 },
    QualityTier { tier: Tier, epsilon: f64, budget_cents: f64 },
}

/// Convert a stated accuracy and budget into a goal belief predicate and a
/// cost horizon. The failure penalty defaults to ten times the budget.
pub fn elicit_goal(req: GoalRequest, registry: &Registry) -> Result<GoalSpec, GoalError> {
    let (epsilon, budget) = match &req {
        GoalRequest::AnswerAccuracy { epsilon, budget_cents } => (*epsilon, *budget_cents),
        GoalRequest::QualityTier { epsilon, budget_cents, .. } => (*epsilon, *budget_cents),
    };
    if !(epsilon > 0.5 && epsilon <= 1.0) {
        return Err(GoalError::EpsilonOutOfRange(epsilon));
    }
    if let Some(cheapest) = registry.min_positive_cost() {
        if budget < cheapest {
            return Err(GoalError::BudgetTooSmall { budget, cheapest });
        }
    }
    let kind = match req {
        GoalRequest::AnswerAccuracy { epsilon, .. } => GoalKind::AnswerAccuracy { epsilon },
        GoalRequest::QualityTier { tier, epsilon, .. } => GoalKind::QualityTier {
            q_star: tier.quality_threshold(),
            epsilon,
        },
    };
    Ok(GoalSpec {
        kind,
        horizon_cents: budget,
        fail_penalty_cents: 10.0 * budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prims::ModelParams;

    fn stock() -> Registry {
        Registry::standard(&ModelParams::default()).unwrap()
    }

    #[test]
    fn accuracy_goal_maps_budget_to_horizon() {
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.9,
                budget_cents: 20.0,
            },
            &stock(),
        )
        .unwrap();
        assert_eq!(goal.kind, GoalKind::AnswerAccuracy { epsilon: 0.9 });
        assert_eq!(goal.horizon_cents, 20.0);
        assert_eq!(goal.fail_penalty_cents, 200.0);
    }

    #[test]
    fn certainty_target_is_allowed() {
        let goal = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 1.0,
                budget_cents: 5.0,
            },
            &stock(),
        )
        .unwrap();
        assert_eq!(goal.kind, GoalKind::AnswerAccuracy { epsilon: 1.0 });
    }

    #[test]
    fn low_epsilon_rejected() {
        let err = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.5,
                budget_cents: 5.0,
            },
            &stock(),
        )
        .unwrap_err();
        assert_eq!(err, GoalError::EpsilonOutOfRange(0.5));
    }

    #[test]
    fn budget_below_cheapest_primitive_rejected() {
        let err = elicit_goal(
            GoalRequest::AnswerAccuracy {
                epsilon: 0.9,
                budget_cents: 0.5,
            },
            &stock(),
        )
        .unwrap_err();
        assert!(matches!(err, GoalError::BudgetTooSmall { .. }));
    }

    #[test]
    fn tier_thresholds() {
        assert_eq!(Tier::Satisfactory.quality_threshold(), 0.6);
        assert_eq!(Tier::Excellent.quality_threshold(), 0.8);
        assert_eq!(Tier::AlmostPerfect.quality_threshold(), 0.9);
        let goal = elicit_goal(
            GoalRequest::QualityTier {
                tier: Tier::AlmostPerfect,
                epsilon: 0.8,
                budget_cents: 40.0,
            },
            &stock(),
        )
        .unwrap();
        assert_eq!(
            goal.kind,
            GoalKind::QualityTier {
                q_star: 0.9,
                epsilon: 0.8
            }
        );
    }
}
