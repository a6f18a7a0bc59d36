use serde::{Deserialize, Serialize};

use super::config::ScheduleConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub warmup_epochs: usize,
    pub alternating_epochs: usize,
    pub cooldown_epochs: usize,
    pub flow_steps_per_base_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    VelocityField,
    BaseDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerDecision {
    pub mode_train: TrainMode,
    pub flag_settoeval_h: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Period {
    Warmup,
    Alternating,
    Cooldown,
}

impl TrainingPlan {
    /// Splits `total` epochs by the configured fractions; rounding error
    /// goes to the alternating period.
    pub fn from_schedule(total: usize, s: &ScheduleConfig) -> Result<Self> {
        let warmup = (s.warmup * total as f64).round() as usize;
        let cooldown = ((s.cooldown * total as f64).round() as usize).min(total - warmup.min(total));
        let warmup = warmup.min(total);
        let plan = Self {
            warmup_epochs: warmup,
            alternating_epochs: total - warmup - cooldown,
            cooldown_epochs: cooldown,
            flow_steps_per_base_step: s.flow_steps_per_base_step,
        };
        if total > 0 {
            plan.validate()?;
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::invalid("training plan has no epochs"));
        }
        if self.flow_steps_per_base_step == 0 {
            return Err(Error::invalid("flow_steps_per_base_step must be positive"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.warmup_epochs + self.alternating_epochs + self.cooldown_epochs
    }

    pub fn period(&self, epoch: usize) -> Result<Period> {
        if epoch < self.warmup_epochs {
            Ok(Period::Warmup)
        } else if epoch < self.warmup_epochs + self.alternating_epochs {
            Ok(Period::Alternating)
        } else if epoch < self.total() {
            Ok(Period::Cooldown)
        } else {
            Err(Error::invalid(format!(
                "epoch {epoch} is beyond the {}-epoch schedule",
                self.total()
            )))
        }
    }

    pub fn next(&self, epoch: usize, iteration: u64) -> Result<PlannerDecision> {
        let k = self.flow_steps_per_base_step as u64;
        let (mode_train, flag_settoeval_h) = match self.period(epoch)? {
            Period::Warmup => (TrainMode::VelocityField, false),
            Period::Alternating if iteration % (k + 1) == k => (TrainMode::BaseDistribution, false),
            Period::Alternating => (TrainMode::VelocityField, false),
            Period::Cooldown => (TrainMode::VelocityField, true),
        };
        Ok(PlannerDecision {
            mode_train,
            flag_settoeval_h,
        })
    }

    /// Position within the alternating period in `[0, 1]`, clamped outside it.
    pub fn alternating_progress(&self, epoch: usize) -> f64 {
        if self.alternating_epochs <= 1 || epoch < self.warmup_epochs {
            return 0.0;
        }
        let k = (epoch - self.warmup_epochs).min(self.alternating_epochs - 1);
        k as f64 / (self.alternating_epochs - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> TrainingPlan {
        TrainingPlan {
            warmup_epochs: 1,
            alternating_epochs: 2,
            cooldown_epochs: 1,
            flow_steps_per_base_step: 4,
        }
    }

    #[test]
    fn periods() {
        let p = plan();
        for it in 0..10 {
            let d = p.next(0, it).unwrap();
            assert_eq!((d.mode_train, d.flag_settoeval_h), (TrainMode::VelocityField, false));
            let d = p.next(3, it).unwrap();
            assert_eq!((d.mode_train, d.flag_settoeval_h), (TrainMode::VelocityField, true));
        }
        let modes: Vec<_> = (0..5).map(|it| p.next(1, it).unwrap().mode_train).collect();
        let v = TrainMode::VelocityField;
        assert_eq!(modes, vec![v, v, v, v, TrainMode::BaseDistribution]);
        assert!(p.next(4, 0).is_err());
    }

    #[test]
    fn default_split() {
        let p = TrainingPlan::from_schedule(10, &ScheduleConfig::default()).unwrap();
        assert_eq!((p.warmup_epochs, p.alternating_epochs, p.cooldown_epochs), (2, 6, 2));
        let p = TrainingPlan::from_schedule(1, &ScheduleConfig::default()).unwrap();
        assert_eq!(p.total(), 1);
        assert_eq!(TrainingPlan::from_schedule(0, &ScheduleConfig::default()).unwrap().total(), 0);
    }
}
