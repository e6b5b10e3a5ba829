//! Tree-shaped planning traffic and the plan cache.

use ckpt_core::comm::{build_topology, Comm};
use ckpt_core::metadata::Dtype;
use ckpt_core::planner::{plan_with_cache, PlanCache};
use ckpt_core::sharding::{all_layouts, ModelSpec, ShardingSpec, TensorSpec};

fn main() -> ckpt_core::Result<()> {
    let topo = build_topology(8, 4, 2);
    println!("edges (child, parent): {:?}", topo.edges());
    println!("max fan-in {} vs {} for a flat gather", topo.max_fan_in(), topo.flat_fan_in());

    let big = build_topology(64, 8, 2);
    println!("64 ranks: depth of rank 63 = {}, max fan-in {}", big.depth(63), big.max_fan_in());

    let model = ModelSpec {
        tensors: vec![TensorSpec {
            fqn: "w".into(),
            global_shape: vec![64, 64],
            dtype: Dtype::F32,
            tp_shard_axis: Some(0),
            pp_stage: 0,
        }],
        seed: 1,
    };
    let spec: ShardingSpec = "tp=2,dp=4,pp=1".parse()?;
    let layouts = all_layouts(&model, &spec)?;
    let comm = Comm::for_world(spec.world_size());
    let mut cache = PlanCache::new();
    for save in 1..=3 {
        let before = comm.counters().planning_messages();
        let planned = plan_with_cache(&mut cache, &comm, &model, &layouts, &spec)?;
        println!(
            "save {save}: cache hit {}, coordinator messages {}",
            planned.cache_hit,
            comm.counters().planning_messages() - before
        );
    }

    comm.kill(5);
    let delivery = comm.tree_gather((0..8).map(|r| (r, r)).collect());
    println!("with rank 5 down the gather misses {:?}", delivery.missing);
    Ok(())
}
