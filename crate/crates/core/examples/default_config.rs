//! Prints the full default run configuration as JSON.

use fpo_lab::cli::RunConfig;

fn main() -> fpo_lab::Result<()> {
    let json = serde_json::to_string_pretty(&RunConfig::default()).map_err(|e| fpo_lab::Error::Config(e.to_string()))?;
    println!("{json}");
    Ok(())
}
