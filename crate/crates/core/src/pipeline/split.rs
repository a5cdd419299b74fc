//! Chronological train / validation / test split.

use crate::error::{Error, Result};
use crate::geo::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Sorts by departure (stable) and cuts at `floor(0.7 n)` and `floor(0.1 n)`; the remainder
/// goes to test.
pub fn split_chronological(mut trajs: Vec<Trajectory>) -> Result<Split> {
    let n = trajs.len();
    if n < 10 {
        return Err(Error::input(format!("need at least 10 trajectories to split, got {n}")));
    }
    trajs.sort_by_key(Trajectory::departure);
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = trajs.split_off(n_train + n_val);
    let val = trajs.split_off(n_train);
    Ok(Split { train: trajs, val, test })
}
