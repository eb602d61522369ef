mod common;

use common::{count_generator, count_op, count_reduction};
use proptest::prelude::*;
use srnas::costmodel::{discriminator_cost, generator_cost, op_cost, red_op_cost, upsample_stages};
use srnas::modelbuilder::{build_discriminator, build_generator, GeneratorInit};
use srnas::searchspace::{decode_discriminator, decode_generator, Genome, SpaceKind, CELL_NODES, DISC_BLOCKS, OPS, RED_OPS};
use srnas::tensorkit::Layer;

fn generator_genome() -> impl Strategy<Value = Genome> {
    let nodes: Vec<_> = (0..CELL_NODES).map(|i| (0..OPS.len(), 0..=i)).collect();
    nodes.prop_map(|n| Genome::generator_from_nodes(&n).unwrap())
}

fn discriminator_genome() -> impl Strategy<Value = Genome> {
    proptest::collection::vec((0..OPS.len(), 0..RED_OPS.len()), DISC_BLOCKS)
        .prop_map(|b| Genome::new(SpaceKind::Discriminator, b.into_iter().flat_map(|(o, r)| [o, r]).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn op_mult_adds_match_direct_execution(op in 0..OPS.len(), c in prop::sample::select(vec![4usize, 8, 12, 16]), h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let op = OPS[op];
        let k = op.kernel().unwrap_or(1);
        prop_assume!(k <= h && k <= w);
        let model = op_cost(op, c, c, (h, w)).unwrap();
        prop_assert_eq!(model.mult_adds, count_op(op, c, h, w, seed));
    }

    #[test]
    fn reduction_mult_adds_match_direct_execution(op in 0..RED_OPS.len(), c in prop::sample::select(vec![4usize, 8, 16]), h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let op = RED_OPS[op];
        prop_assume!(op.kernel() <= h && op.kernel() <= w);
        prop_assert_eq!(red_op_cost(op, c, (h, w)).unwrap().mult_adds, count_reduction(op, c, h, w, seed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn generator_params_match_built_network(g in generator_genome(), scale in prop::sample::select(vec![2usize, 4]), seed in any::<u64>()) {
        let cell = decode_generator(&g).unwrap();
        let report = generator_cost(&cell, 8, scale, (8 * scale, 8 * scale)).unwrap();
        let net = build_generator(&g, 8, scale, GeneratorInit::random(seed)).unwrap();
        prop_assert_eq!(report.params, net.num_params() as u64);
        prop_assert_eq!(report.breakdown.iter().map(|e| e.params).sum::<u64>(), report.params);
    }

    #[test]
    fn discriminator_params_match_built_network(g in discriminator_genome(), m in prop::sample::select(vec![0usize, 16]), seed in any::<u64>()) {
        let blocks = decode_discriminator(&g, 4).unwrap();
        let report = discriminator_cost(&blocks, 4, m, 256).unwrap();
        let net = build_discriminator(&g, 4, m, 256, seed).unwrap();
        prop_assert_eq!(report.params, net.num_params() as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn generator_mult_adds_match_direct_execution(g in generator_genome(), scale in prop::sample::select(vec![2usize, 4]), seed in any::<u64>()) {
        let cell = decode_generator(&g).unwrap();
        let ops: Vec<_> = cell.nodes.iter().map(|n| n.op).collect();
        let report = generator_cost(&cell, 8, scale, (8 * scale, 7 * scale)).unwrap();
        prop_assert_eq!(report.mult_adds, count_generator(&ops, 8, upsample_stages(scale).unwrap(), 7, 8, seed));
    }
}

#[test]
fn identity_only_cell_costs_only_the_fixed_layers() {
    let g = Genome::generator_from_nodes(&(0..CELL_NODES).map(|i| (15, i)).collect::<Vec<_>>()).unwrap();
    let cell = decode_generator(&g).unwrap();
    let report = generator_cost(&cell, 8, 2, (16, 16)).unwrap();
    let nodes: u64 = report.breakdown.iter().filter(|e| e.id.starts_with("node")).map(|e| e.mult_adds).sum();
    assert_eq!(nodes, 0);
}
