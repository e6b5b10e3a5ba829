//! How flatten-concat ZeRO shards turn into regular blocks.

use ckpt_core::metadata::Dtype;
use ckpt_core::sharding::{layout_for_rank, zero_range, ModelSpec, ShardingSpec, TensorSpec, ZeroMode};

fn tensor(fqn: &str, shape: &[u64]) -> TensorSpec {
    TensorSpec {
        fqn: fqn.into(),
        global_shape: shape.to_vec(),
        dtype: Dtype::F32,
        tp_shard_axis: None,
        pp_stage: 0,
    }
}

fn main() -> ckpt_core::Result<()> {
    let model = ModelSpec {
        tensors: vec![tensor("A", &[2, 2]), tensor("B", &[3, 2]), tensor("C", &[2, 2])],
        seed: 0,
    };
    let spec = ShardingSpec::new(1, 2, 1, ZeroMode::FlattenConcatShard);
    for rank in 0..spec.world_size() {
        let (start, end) = zero_range(14, spec.dp, rank);
        println!("rank {rank} owns flat elements [{start}, {end})");
        for (shard, _) in &layout_for_rank(&model, &spec, rank)?.optimizer_shards {
            println!("  {} offsets {:?} lengths {:?}", shard.fqn, shard.nd_offsets, shard.nd_lengths);
        }
    }
    Ok(())
}
