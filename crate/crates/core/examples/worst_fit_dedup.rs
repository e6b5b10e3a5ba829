//! Replicated shards are written once, spread over their holders.

use ckpt_core::metadata::Dtype;
use ckpt_core::planner::{plan_save, save_loads};
use ckpt_core::sharding::{all_layouts, ModelSpec, ShardingSpec, TensorSpec, ZeroMode};

fn main() -> ckpt_core::Result<()> {
    let sizes = [100u64, 60, 50, 40];
    let model = ModelSpec {
        tensors: sizes
            .iter()
            .enumerate()
            .map(|(i, n)| TensorSpec {
                fqn: format!("t{i}"),
                global_shape: vec![*n],
                dtype: Dtype::U8,
                tp_shard_axis: None,
                pp_stage: 0,
            })
            .collect(),
        seed: 0,
    };
    let spec = ShardingSpec::new(1, 2, 1, ZeroMode::None);
    let mut layouts = all_layouts(&model, &spec)?;
    // Model states only, so every shard is replicated on both ranks.
    layouts.iter_mut().for_each(|l| l.optimizer_shards.clear());

    let (plans, _) = plan_save(&layouts, &spec)?;
    for (rank, plan) in &plans {
        let items: Vec<String> = plan
            .items
            .iter()
            .map(|i| format!("{}({}B)", i.shard.fqn, i.byte_len()))
            .collect();
        println!("rank {rank} writes {}", items.join(" "));
    }
    println!("bytes per rank: {:?}", save_loads(&plans));
    Ok(())
}
