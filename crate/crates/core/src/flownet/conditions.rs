use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{Command, Trajectory, Vec2};

/// Which intent signal a model is trained with. The three intent signals
/// overlap semantically, so a model uses at most one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionType {
    Anchor,
    Goal,
    Command,
    None,
}

impl std::str::FromStr for ConditionType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(Self::Anchor),
            "goal" => Ok(Self::Goal),
            "command" => Ok(Self::Command),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown condition type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionSet {
    pub plan_anchor: Option<Trajectory>,
    pub goal: Option<Vec2>,
    pub command: Option<Command>,
    /// Ego-progress reward in `[0, 1]`.
    pub reward: Option<f64>,
    pub intent_mask: bool,
    pub reward_mask: bool,
}

impl ConditionSet {
    /// Both groups masked.
    pub fn unconditional() -> Self {
        Self {
            intent_mask: true,
            reward_mask: true,
            ..Self::default()
        }
    }

    pub fn masked(&self) -> Self {
        Self {
            intent_mask: true,
            reward_mask: true,
            ..self.clone()
        }
    }

    pub fn with_reward(mut self, reward: f64) -> Self {
        self.reward = Some(reward);
        self.reward_mask = false;
        self
    }

    /// Intent from an anchor trajectory, as the given condition type reads it.
    pub fn from_anchor(kind: ConditionType, anchor: &Trajectory) -> Self {
        let mut c = Self::unconditional();
        match kind {
            ConditionType::Anchor => c.plan_anchor = Some(anchor.clone()),
            ConditionType::Goal => c.goal = Some(crate::vocab::goal_from_anchor(anchor)),
            ConditionType::Command => c.command = Some(Command::of(anchor)),
            ConditionType::None => return c,
        }
        c.intent_mask = false;
        c
    }

    /// Independent Bernoulli(`p`) masking of each group.
    pub fn drop_groups<R: Rng>(mut self, p: f64, rng: &mut R) -> Self {
        if rng.random_bool(p) {
            self.intent_mask = true;
        }
        if rng.random_bool(p) {
            self.reward_mask = true;
        }
        self
    }

    /// Rejects unmasked groups whose value is missing and intent values that
    /// do not belong to the model's condition type.
    pub fn check(&self, kind: ConditionType, horizon: usize) -> Result<()> {
        let present = [
            (ConditionType::Anchor, self.plan_anchor.is_some()),
            (ConditionType::Goal, self.goal.is_some()),
            (ConditionType::Command, self.command.is_some()),
        ];
        for (k, p) in present {
            if p && k != kind {
                return Err(Error::Config(format!(
                    "{k:?} condition given to a {kind:?}-conditioned model"
                )));
            }
        }
        if !self.intent_mask {
            let ok = match kind {
                ConditionType::Anchor => self.plan_anchor.is_some(),
                ConditionType::Goal => self.goal.is_some(),
                ConditionType::Command => self.command.is_some(),
                ConditionType::None => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "unmasked intent without a {kind:?} value"
                )));
            }
        }
        if let Some(a) = &self.plan_anchor {
            if a.len() != horizon {
                return Err(Error::Dimension(format!(
                    "anchor of {} waypoints for horizon {horizon}",
                    a.len()
                )));
            }
        }
        if !self.reward_mask && self.reward.is_none() {
            return Err(Error::Config("unmasked reward without a value".into()));
        }
        Ok(())
    }
}
