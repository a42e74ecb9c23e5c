//! Builds a smoke-sized lab, aligns with DPO and FPO and prints the
//! held-out metrics at every evaluation step.

use fpo_lab::cli::RunConfig;
use fpo_lab::losses::Method;
use fpo_lab::pipeline::Lab;

fn main() -> fpo_lab::Result<()> {
    let run = RunConfig::from_json(include_str!("../configs/smoke.json"), &[])?;
    let cell = run.sweep.resolved_cells(&run.lab)?.remove(0);
    let mut lab = Lab::build(run.lab)?;
    for method in [Method::Dpo, Method::Fpo] {
        let (_, reports) = lab.run(method, &cell)?;
        println!("{method}");
        for r in &reports {
            println!(
                "  step {:>3}: acc {:.3}  H {:.3}  kl_margin {:.2e}  mse_margin {:.3}  stored ref floats {}",
                r.step, r.pref_accuracy, r.entropy_h, r.kl_margin, r.mse_margin, r.stored_ref_floats
            );
        }
    }
    Ok(())
}
