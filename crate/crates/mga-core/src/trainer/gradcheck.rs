//! Verifies analytic batch gradients against central finite differences,
//! per parameter group, on a subsample of coordinates.

use crate::data::types::ImageRecord;
use crate::error::Result;
use crate::model::ModelParams;
use crate::numerics::fd::{finite_diff_gradient, max_relative_error};
use crate::trainer::adam::Grads;
use crate::trainer::config::TrainConfig;
use crate::trainer::step::{batch_forward_backward, batch_loss};

pub const DEFAULT_COORDS_PER_GROUP: usize = 6;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Runs the batch backward pass and checks it. 64-bit only; use the mean
/// reduction (or a max-reduction instance away from argmax ties).
pub fn grad_check(
    model: &ModelParams<f64>,
    records: &[&ImageRecord<f64>],
    labels: &[usize],
    config: &TrainConfig,
    coords_per_group: usize,
) -> Result<GradCheckReport> {
    let step = batch_forward_backward(model, records, labels, config)?;
    grad_check_against(model, records, labels, config, coords_per_group, &step.grads)
}

/// Checks a supplied gradient set instead of computing one; lets tests
/// feed a corrupted adjoint as a negative control.
pub fn grad_check_against(
    model: &ModelParams<f64>,
    records: &[&ImageRecord<f64>],
    labels: &[usize],
    config: &TrainConfig,
    coords_per_group: usize,
    grads: &Grads<f64>,
) -> Result<GradCheckReport> {
    let mut groups = Vec::new();
    let mut worst = 0.0f64;
    for name in ModelParams::<f64>::group_names() {
        let base = model.group(&name).expect("group exists");
        let len = base.len();
        let stride = (len / coords_per_group.max(1)).max(1);
        let coords: Vec<usize> = (0..len).step_by(stride).collect();
        let at = |c: usize| grads.get(&name).map_or(0.0, |g| g.as_slice()[c]);
        let analytic: Vec<f64> = coords.iter().map(|&c| at(c)).collect();
        let sub: Vec<f64> = coords.iter().map(|&c| base.as_slice()[c]).collect();
        let numeric = finite_diff_gradient(
            |v| {
                let mut m = model.clone();
                let target = m.group_mut(&name).expect("group exists");
                for (&c, &val) in coords.iter().zip(v) {
                    target.as_mut_slice()[c] = val;
                }
                batch_loss(&m, records, labels, config)
            },
            &sub,
            FD_STEP,
        )?;
        let err = max_relative_error(&analytic, &numeric);
        worst = worst.max(err);
        groups.push(GroupCheck {
            name,
            max_relative_error: err,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport {
        groups,
        max_relative_error: worst,
    })
}
