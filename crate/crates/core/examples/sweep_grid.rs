//! A two-seed, three-method grid on the smoke config, printed as CSV.

use fpo_lab::cli::RunConfig;
use fpo_lab::eval::run_experiment_grid;
use fpo_lab::losses::Method;
use fpo_lab::pipeline::{Lab, LabConfig};

fn main() -> fpo_lab::Result<()> {
    let run = RunConfig::from_json(include_str!("../configs/smoke.json"), &[])?;
    let cells = run.sweep.resolved_cells(&run.lab)?;
    let mut current: Option<(u64, Lab)> = None;
    let grid = run_experiment_grid(&[Method::Dpo, Method::Simpo, Method::Fpo], &[0, 1], &cells, |method, seed, cell| {
        if current.as_ref().is_none_or(|(s, _)| *s != seed) {
            current = Some((seed, Lab::build(LabConfig { seed, ..run.lab.clone() })?));
        }
        let (_, lab) = current.as_mut().expect("lab built above");
        Ok(lab.run(method, cell)?.1)
    });
    print!("{}", grid.to_csv());
    for f in &grid.failures {
        eprintln!("failed: {} seed {}: {}", f.method, f.seed, f.error);
    }
    Ok(())
}
