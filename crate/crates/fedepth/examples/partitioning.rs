//! Contrasts the two ways of sharding a dataset across participants.
//!
//! The uniform split hands every participant a random same-sized slice,
//! so each shard mixes all drives. The drive-grouped split keeps whole
//! recordings together, which is what real vehicles would hold, and
//! produces shards that are both unequal in size and single-sourced.

use fedepth::data::{
    drive_histogram, generate_synthetic_scene, partition_iid, partition_niid, SceneSpec,
};
use fedepth::rng::derive_seed;

fn main() -> fedepth::Result<()> {
    let spec = SceneSpec {
        width: 16,
        height: 8,
        drives: 5,
        frames_per_drive: 7,
        boxes: 0,
        ..SceneSpec::default()
    };
    let samples = generate_synthetic_scene::<f32>(&spec, 2)?;
    let drives: Vec<String> = samples.iter().map(|s| s.drive_id.clone()).collect();
    println!("{} samples across {} drives", samples.len(), drive_histogram(&samples).len());

    let seed = derive_seed(2, "partition", &[]);
    for (label, plan) in [
        ("uniform", partition_iid(samples.len(), 3, seed)?),
        ("drive-grouped", partition_niid(&drives, 3, seed)?),
    ] {
        println!("\n{label} split, {} participants:", plan.participants());
        for p in 0..plan.participants() {
            let ids = plan.samples_of(p);
            let mut owned: Vec<&str> = ids.iter().map(|&i| drives[i].as_str()).collect();
            owned.sort();
            owned.dedup();
            println!("  participant {p}: {:>2} samples from {:?}", ids.len(), owned);
        }
    }
    Ok(())
}
