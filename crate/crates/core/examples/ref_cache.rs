//! Precomputes the offline reference cache, saves it and checks that the
//! cached loss matches the live reference when nothing is truncated.

use fpo_lab::cache::{precompute, RefCache};
use fpo_lab::data::{gen_pref_dataset, LengthConfig, PrefRule};
use fpo_lab::losses::{verify_cache_equivalence, LossConfig, Method};
use fpo_lab::model::{LmConfig, Tap, TinyLM};
use fpo_lab::sae::{PoolingMode, SparseAutoencoder};

fn main() -> fpo_lab::Result<()> {
    let lm = LmConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        d_ff: 32,
        ..LmConfig::default()
    };
    let reference = TinyLM::<f64>::init(lm, 0)?;
    let policy = TinyLM::<f64>::init(lm, 1)?;
    let sae = SparseAutoencoder::<f64>::init(16, 64, 0.0, 2)?;
    let pairs = gen_pref_dataset(3, 32, &PrefRule::default(), &LengthConfig::default())?;
    let tap = Tap::residual(1);

    for k in [4, 16, 64] {
        let cache = precompute(&pairs, &reference.cast::<f32>(), &sae.cast::<f32>(), tap, PoolingMode::Mean, k)?;
        println!("k = {k:>2}: {} floats, {} bytes", cache.cached_floats(), cache.to_bytes().len());
    }

    let dir = std::env::temp_dir().join("fpo-lab-ref-cache-example");
    std::fs::create_dir_all(&dir).map_err(|source| fpo_lab::Error::Io { path: dir.clone(), source })?;
    let path = dir.join("ref_cache.fpoc");
    let cache = precompute(&pairs, &reference, &sae, tap, PoolingMode::Mean, 64)?;
    cache.save(&path)?;
    // the file stores f32 values, so the reloaded cache is f32-exact only
    let back = RefCache::<f64>::load(&path)?;
    back.verify_checksums(sae.checksum(), reference.checksum())?;
    let cfg = LossConfig {
        k: 64,
        tap,
        ..LossConfig::for_method(Method::Fpo)
    };
    let dev = verify_cache_equivalence(&policy, &reference, &sae, &back, &pairs, &cfg)?;
    println!("saved to {}; cached vs live deviation at k = m: {dev:.2e}", path.display());
    Ok(())
}
