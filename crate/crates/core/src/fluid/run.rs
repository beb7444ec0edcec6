use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{SimParams, SimState, Solver, CONTEXT, SUPERSATURATION, VORTICITY};
use crate::error::Result;
use crate::fields::{Field, SnapshotSet};

/// Kinetic energy recorded during a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySample {
    pub step: usize,
    pub energy: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub set: SnapshotSet,
    pub energy: Vec<EnergySample>,
}

/// Runs `params.n_steps` steps from rest and keeps every
/// `params.snapshot_stride`-th state after spin-up.
pub fn run_simulation(params: &SimParams, subset_name: &str) -> Result<SnapshotSet> {
    Ok(run_with_diagnostics(params, subset_name, 0)?.set)
}

/// As [`run_simulation`], also recording kinetic energy every
/// `energy_every` steps (never when 0).
pub fn run_with_diagnostics(params: &SimParams, subset_name: &str, energy_every: usize) -> Result<SimOutput> {
    let solver = Solver::new(params)?;
    let grid = *solver.grid();
    let n = grid.n_grid;
    let mut state = SimState::initial(params)?;
    let mut rng = ChaCha20Rng::seed_from_u64(params.rng_seed);
    let mut data = Vec::new();
    let mut samples = 0;
    let mut energy = Vec::new();
    for step in 1..=params.n_steps {
        solver.step(&mut state, &mut rng)?;
        if energy_every > 0 && step % energy_every == 0 {
            energy.push(EnergySample { step, energy: state.kinetic_energy(&grid) });
        }
        if step > params.n_spinup && (step - params.n_spinup) % params.snapshot_stride == 0 {
            data.extend(state.vorticity_grid());
            let q = state.q_periodic_grid();
            data.extend(q.iter().zip(solver.modulation()).map(|(q, m)| q - m));
            data.extend_from_slice(solver.modulation());
            samples += 1;
        }
    }
    log::info!("{subset_name}: {samples} snapshots of {n}x{n} after {} steps", params.n_steps);
    let field = Field::new(n, vec![VORTICITY.into(), SUPERSATURATION.into(), CONTEXT.into()], samples, data)?;
    let mut set = SnapshotSet::new(field, subset_name)?;
    set.sim_params_digest = params.digest();
    set.spinup_discarded = params.n_spinup as u64;
    Ok(SimOutput { set, energy })
}
