//! Executable networks: the searched generator, the searched discriminator
//! and the frozen feature extractor used by the perceptual losses.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::costmodel::upsample_stages;
use crate::error::{Error, Result};
use crate::searchspace::{
    decode_discriminator, decode_generator, CellGraph, CellOutput, Genome, OpKind, RedOpKind,
    CONV_GROUPS, DISC_BLOCKS, INV_EXPANSION, REDUCTION_STRIDE,
};
use crate::tensorkit::{
    BatchNorm2d, ChannelGate, Conv2d, ConvGeometry, DepthwiseSeparable, Flatten, Identity,
    InvertedBottleneck, Layer, Linear, PRelu, Param, PixelShuffle, Tensor, WeightSnapshot,
};
use crate::weightcache::WeightCache;

/// Default number of generator feature maps.
pub const DEFAULT_CHANNELS: usize = 16;
/// Discriminator patches must survive five stride-2 reductions.
pub const PATCH_MULTIPLE: usize = 1 << DISC_BLOCKS;

fn conv(name: &str, k: usize, cin: usize, cout: usize, groups: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Conv2d> {
    Conv2d::new(
        name,
        ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            groups,
        },
        true,
        rng,
    )
}

/// Instantiates a searchable operation on `c` channels.
pub fn build_op(name: &str, op: OpKind, c: usize, spectral: bool, rng: &mut ChaCha8Rng) -> Result<Box<dyn Layer>> {
    Ok(match op {
        OpKind::Conv { k } | OpKind::GroupConv { k } => {
            let groups = if matches!(op, OpKind::GroupConv { .. }) { CONV_GROUPS } else { 1 };
            let c = conv(name, k, c, c, groups, 1, rng)?;
            Box::new(if spectral { c.with_spectral_norm(rng) } else { c })
        }
        OpKind::DSep { k } => {
            let b = DepthwiseSeparable::new(name, k, c, c, rng)?;
            Box::new(if spectral { b.with_spectral_norm(rng) } else { b })
        }
        OpKind::InvBlock { k } => {
            let b = InvertedBottleneck::new(name, k, c, c, INV_EXPANSION, rng)?;
            Box::new(if spectral { b.with_spectral_norm(rng) } else { b })
        }
        OpKind::SeBlock | OpKind::CaBlock => {
            let b = ChannelGate::new(name, c, rng);
            Box::new(if spectral { b.with_spectral_norm(rng) } else { b })
        }
        OpKind::Identity => Box::new(Identity::default()),
    })
}

/// One cell node: the chosen operation followed by PReLU.
struct CellNodeModule {
    op: Box<dyn Layer>,
    act: PRelu,
}

impl CellNodeModule {
    fn new(prefix: &str, op: OpKind, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(CellNodeModule {
            op: build_op(&format!("{prefix}.op"), op, n, false, rng)?,
            act: PRelu::new(&format!("{prefix}.act"), n),
        })
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.op.params();
        p.extend(self.act.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.op.params_mut();
        p.extend(self.act.params_mut());
        p
    }
}

/// Parameter names and shapes of one cell node, relative to the node.
/// These are the tensors a weight-cache entry holds.
pub fn node_param_shapes(op: OpKind, n: usize) -> Vec<(String, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match CellNodeModule::new("node", op, n, &mut rng) {
        Ok(m) => m
            .params()
            .into_iter()
            .map(|p| (p.name["node.".len()..].to_string(), p.value.shape().to_vec()))
            .collect(),
        Err(_) => Vec::new(),
    }
}

fn node_prefix(node: usize) -> String {
    format!("cell.node{node}")
}

/// Where a new generator's weights come from. Anything not supplied is
/// drawn from a He-normal initializer seeded by `seed`.
#[derive(Clone, Copy, Default)]
pub struct GeneratorInit<'a> {
    pub seed: u64,
    /// Per-(node, op) weights.
    pub cache: Option<&'a WeightCache>,
    /// Whole-network weights; tensors absent from the snapshot stay random.
    pub snapshot: Option<&'a WeightSnapshot>,
}

impl<'a> GeneratorInit<'a> {
    pub fn random(seed: u64) -> Self {
        GeneratorInit { seed, ..Default::default() }
    }
}

/// Generator: head conv, searched cell, post conv, x2 pixel-shuffle stages
/// and tail conv.
pub struct GeneratorNet {
    pub genome: Genome,
    pub cell: CellGraph,
    pub channels: usize,
    pub scale: usize,
    head: Conv2d,
    nodes: Vec<CellNodeModule>,
    post: Conv2d,
    ups: Vec<(Conv2d, PixelShuffle)>,
    tail: Conv2d,
}

impl std::fmt::Debug for GeneratorNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorNet")
            .field("genome", &self.genome)
            .field("channels", &self.channels)
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

pub fn build_generator(genome: &Genome, n: usize, scale: usize, init: GeneratorInit<'_>) -> Result<GeneratorNet> {
    let cell = decode_generator(genome)?;
    let stages = upsample_stages(scale)?;
    if n == 0 || n % CONV_GROUPS != 0 {
        return Err(Error::Config(format!("channel count {n} must be a positive multiple of {CONV_GROUPS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let head = conv("head", 3, 3, n, 1, 1, &mut rng)?;
    let mut nodes = Vec::with_capacity(cell.len());
    for (i, node) in cell.nodes.iter().enumerate() {
        nodes.push(CellNodeModule::new(&node_prefix(i + 1), node.op, n, &mut rng)?);
    }
    let post = conv("post", 3, n, n, 1, 1, &mut rng)?;
    let mut ups = Vec::new();
    for s in 0..stages {
        ups.push((conv(&format!("up{}", s + 1), 3, n, 4 * n, 1, 1, &mut rng)?, PixelShuffle::new(2)));
    }
    let tail = conv("tail", 3, n, 3, 1, 1, &mut rng)?;
    let mut net = GeneratorNet {
        genome: genome.clone(),
        cell,
        channels: n,
        scale,
        head,
        nodes,
        post,
        ups,
        tail,
    };
    if let Some(snap) = init.snapshot {
        net.load_matching(snap)?;
    }
    if let Some(cache) = init.cache {
        if cache.channels() != n {
            return Err(Error::Config(format!(
                "weight cache holds {}-channel nodes, generator has {n}",
                cache.channels()
            )));
        }
        for i in 1..=net.nodes.len() {
            let op = net.cell.nodes[i - 1].op;
            if let Some(w) = cache.lookup(i, op) {
                net.load_node(i, &w)?;
            }
        }
    }
    Ok(net)
}

fn load_into(params: Vec<&mut Param>, tensors: &BTreeMap<String, Tensor>, strip: &str, require_all: bool) -> Result<usize> {
    let mut loaded = 0;
    for p in params {
        let key = p.name.strip_prefix(strip).unwrap_or(&p.name).to_string();
        match tensors.get(&key) {
            Some(t) => {
                p.load(t)?;
                loaded += 1;
            }
            None if require_all => {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    actual: Vec::new(),
                })
            }
            None => {}
        }
    }
    Ok(loaded)
}

impl GeneratorNet {
    fn node_output(&self, outs: &[Tensor]) -> Result<Tensor> {
        match &self.cell.output {
            CellOutput::LeafSum(leaves) => {
                let mut acc = outs[leaves[0]].clone();
                for &l in &leaves[1..] {
                    acc.add_assign(&outs[l])?;
                }
                Ok(acc)
            }
            CellOutput::Last => Ok(outs[self.nodes.len()].clone()),
        }
    }

    /// Weights of one cell node (1-based), named relative to the node.
    pub fn node_snapshot(&self, node: usize) -> WeightSnapshot {
        let prefix = format!("{}.", node_prefix(node));
        let mut snap = WeightSnapshot::default();
        for p in self.nodes[node - 1].params() {
            snap.tensors.insert(p.name[prefix.len()..].to_string(), p.value.clone());
        }
        snap
    }

    pub fn load_node(&mut self, node: usize, weights: &WeightSnapshot) -> Result<()> {
        let prefix = format!("{}.", node_prefix(node));
        let module = self
            .nodes
            .get_mut(node - 1)
            .ok_or_else(|| Error::InvalidGenome(format!("no node {node}")))?;
        if weights.tensors.len() != module.params().len() {
            return Err(Error::ShapeMismatch {
                name: prefix,
                expected: vec![module.params().len()],
                actual: vec![weights.tensors.len()],
            });
        }
        load_into(module.params_mut(), &weights.tensors, &prefix, true).map(|_| ())
    }

    /// All weights, tagged with genome hash, scale and channel count.
    pub fn snapshot(&self) -> WeightSnapshot {
        let mut snap = WeightSnapshot::default();
        for p in self.params() {
            snap.tensors.insert(p.name.clone(), p.value.clone());
        }
        snap.tags.insert("kind".into(), "generator".into());
        snap.tags.insert("genome".into(), self.genome.to_json());
        snap.tags.insert("genome_hash".into(), self.genome.hash_hex());
        snap.tags.insert("scale".into(), self.scale.to_string());
        snap.tags.insert("channels".into(), self.channels.to_string());
        snap
    }

    /// Loads every tensor of `snap` whose name matches a parameter; returns
    /// how many were loaded.
    pub fn load_matching(&mut self, snap: &WeightSnapshot) -> Result<usize> {
        load_into(self.params_mut(), &snap.tensors, "", false)
    }

    pub fn load_snapshot(&mut self, snap: &WeightSnapshot) -> Result<()> {
        load_into(self.params_mut(), &snap.tensors, "", true).map(|_| ())
    }
}

impl Layer for GeneratorNet {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h0 = self.head.forward(x)?;
        let mut outs = vec![h0];
        for i in 0..self.nodes.len() {
            let input = self.cell.nodes[i].input;
            let m = &mut self.nodes[i];
            let y = m.op.forward(&outs[input])?;
            let y = m.act.forward(&y)?;
            outs.push(y);
        }
        let mut h = self.node_output(&outs)?;
        h = self.post.forward(&h)?;
        for (c, ps) in &mut self.ups {
            h = c.forward(&h)?;
            h = ps.forward(&h)?;
        }
        self.tail.forward(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = self.tail.backward(grad)?;
        for (c, ps) in self.ups.iter_mut().rev() {
            g = ps.backward(&g)?;
            g = c.backward(&g)?;
        }
        let g = self.post.backward(&g)?;
        let k = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; k + 1];
        let accumulate = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&t),
                None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.cell.output {
            CellOutput::LeafSum(leaves) => {
                for &l in leaves {
                    accumulate(&mut grads[l], g.clone())?;
                }
            }
            CellOutput::Last => accumulate(&mut grads[k], g)?,
        }
        for i in (1..=k).rev() {
            let gi = grads[i]
                .take()
                .ok_or_else(|| Error::State(format!("cell node {i} received no gradient")))?;
            let m = &mut self.nodes[i - 1];
            let gi = m.act.backward(&gi)?;
            let gi = m.op.backward(&gi)?;
            accumulate(&mut grads[self.cell.nodes[i - 1].input], gi)?;
        }
        let g0 = grads[0]
            .take()
            .ok_or_else(|| Error::State("cell input received no gradient".into()))?;
        self.head.backward(&g0)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.head.params();
        for m in &self.nodes {
            p.extend(m.params());
        }
        p.extend(self.post.params());
        for (c, _) in &self.ups {
            p.extend(c.params());
        }
        p.extend(self.tail.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.head.params_mut();
        for m in &mut self.nodes {
            p.extend(m.params_mut());
        }
        p.extend(self.post.params_mut());
        for (c, _) in &mut self.ups {
            p.extend(c.params_mut());
        }
        p.extend(self.tail.params_mut());
        p
    }
}

struct DiscBlock {
    op: Box<dyn Layer>,
    op_bn: BatchNorm2d,
    op_act: PRelu,
    reduce: Conv2d,
    red_bn: BatchNorm2d,
    red_act: PRelu,
}

impl DiscBlock {
    fn layers_mut(&mut self) -> [&mut dyn Layer; 6] {
        [
            self.op.as_mut(),
            &mut self.op_bn,
            &mut self.op_act,
            &mut self.reduce,
            &mut self.red_bn,
            &mut self.red_act,
        ]
    }

    fn layers(&self) -> [&dyn Layer; 6] {
        [
            self.op.as_ref(),
            &self.op_bn,
            &self.op_act,
            &self.reduce,
            &self.red_bn,
            &self.red_act,
        ]
    }
}

/// Discriminator: spectrally normalized stem, five searched reduction
/// blocks, optional bottleneck and a single-logit classifier.
pub struct DiscriminatorNet {
    pub genome: Genome,
    pub patch: usize,
    stem: Conv2d,
    stem_act: PRelu,
    blocks: Vec<DiscBlock>,
    flatten: Flatten,
    bottleneck: Option<(Linear, PRelu)>,
    classifier: Linear,
}

impl std::fmt::Debug for DiscriminatorNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscriminatorNet")
            .field("genome", &self.genome)
            .field("patch", &self.patch)
            .finish_non_exhaustive()
    }
}

fn red_conv(name: &str, op: RedOpKind, c: usize, rng: &mut ChaCha8Rng) -> Result<Conv2d> {
    Ok(conv(name, op.kernel(), c, 2 * c, op.groups(), REDUCTION_STRIDE, rng)?.with_spectral_norm(rng))
}

pub fn build_discriminator(genome: &Genome, n: usize, m: usize, patch: usize, seed: u64) -> Result<DiscriminatorNet> {
    if patch == 0 || patch % PATCH_MULTIPLE != 0 {
        return Err(Error::shape(
            format!("patch divisible by {PATCH_MULTIPLE}"),
            patch.to_string(),
        ));
    }
    if n == 0 || n % CONV_GROUPS != 0 {
        return Err(Error::Config(format!("channel count {n} must be a positive multiple of {CONV_GROUPS}")));
    }
    let decoded = decode_discriminator(genome, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = conv("stem", 3, 3, n, 1, 1, &mut rng)?.with_spectral_norm(&mut rng);
    let mut blocks = Vec::with_capacity(decoded.len());
    for (b, blk) in decoded.iter().enumerate() {
        let name = format!("block{}", b + 1);
        let c = blk.channels;
        blocks.push(DiscBlock {
            op: build_op(&format!("{name}.op"), blk.op, c, true, &mut rng)?,
            op_bn: BatchNorm2d::new(&format!("{name}.op_bn"), c),
            op_act: PRelu::new(&format!("{name}.op_act"), c),
            reduce: red_conv(&format!("{name}.reduce"), blk.reduction, c, &mut rng)?,
            red_bn: BatchNorm2d::new(&format!("{name}.reduce_bn"), 2 * c),
            red_act: PRelu::new(&format!("{name}.reduce_act"), 2 * c),
        });
    }
    let features = n * (patch / PATCH_MULTIPLE).pow(2) * PATCH_MULTIPLE;
    let (bottleneck, classifier) = if m > 0 {
        (
            Some((
                Linear::new("bottleneck", features, m, &mut rng).with_spectral_norm(&mut rng),
                PRelu::new("bottleneck_act", m),
            )),
            Linear::new("classifier", m, 1, &mut rng).with_spectral_norm(&mut rng),
        )
    } else {
        (None, Linear::new("classifier", features, 1, &mut rng).with_spectral_norm(&mut rng))
    };
    Ok(DiscriminatorNet {
        genome: genome.clone(),
        patch,
        stem,
        stem_act: PRelu::new("stem_act", n),
        blocks,
        flatten: Flatten::default(),
        bottleneck,
        classifier,
    })
}

impl DiscriminatorNet {
    /// Length of the flattened feature vector entering the head.
    pub fn flat_features(&self) -> usize {
        match &self.bottleneck {
            Some((l, _)) => l.in_features(),
            None => self.classifier.in_features(),
        }
    }

    pub fn snapshot(&self) -> WeightSnapshot {
        let mut snap = WeightSnapshot::default();
        for p in self.params() {
            snap.tensors.insert(p.name.clone(), p.value.clone());
        }
        snap.tags.insert("kind".into(), "discriminator".into());
        snap.tags.insert("genome".into(), self.genome.to_json());
        snap.tags.insert("genome_hash".into(), self.genome.hash_hex());
        snap
    }
}

impl Layer for DiscriminatorNet {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.patch || w != self.patch {
            return Err(Error::shape(
                format!("{0}x{0} patches", self.patch),
                format!("{h}x{w}"),
            ));
        }
        let mut h = self.stem.forward(x)?;
        h = self.stem_act.forward(&h)?;
        for blk in &mut self.blocks {
            for l in blk.layers_mut() {
                h = l.forward(&h)?;
            }
        }
        h = self.flatten.forward(&h)?;
        if let Some((l, a)) = &mut self.bottleneck {
            h = l.forward(&h)?;
            h = a.forward(&h)?;
        }
        self.classifier.forward(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = self.classifier.backward(grad)?;
        if let Some((l, a)) = &mut self.bottleneck {
            g = a.backward(&g)?;
            g = l.backward(&g)?;
        }
        g = self.flatten.backward(&g)?;
        for blk in self.blocks.iter_mut().rev() {
            for l in blk.layers_mut().into_iter().rev() {
                g = l.backward(&g)?;
            }
        }
        g = self.stem_act.backward(&g)?;
        self.stem.backward(&g)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.stem_act.params());
        for blk in &self.blocks {
            for l in blk.layers() {
                p.extend(l.params());
            }
        }
        if let Some((l, a)) = &self.bottleneck {
            p.extend(l.params());
            p.extend(a.params());
        }
        p.extend(self.classifier.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.stem_act.params_mut());
        for blk in &mut self.blocks {
            p.extend(blk.op.params_mut());
            p.extend(blk.op_bn.params_mut());
            p.extend(blk.op_act.params_mut());
            p.extend(blk.reduce.params_mut());
            p.extend(blk.red_bn.params_mut());
            p.extend(blk.red_act.params_mut());
        }
        if let Some((l, a)) = &mut self.bottleneck {
            p.extend(l.params_mut());
            p.extend(a.params_mut());
        }
        p.extend(self.classifier.params_mut());
        p
    }

    fn set_training(&mut self, training: bool) {
        self.stem.set_training(training);
        for blk in &mut self.blocks {
            for l in blk.layers_mut() {
                l.set_training(training);
            }
        }
        if let Some((l, _)) = &mut self.bottleneck {
            l.set_training(training);
        }
        self.classifier.set_training(training);
    }
}

/// Channel widths of the frozen extractor's three stride-2 convolutions.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// Fixed random convolutional feature extractor. Weights are drawn once
/// from N(0, 1/fan_in) and never updated; gradients flow to the input only.
pub struct FrozenExtractor {
    seed: u64,
    convs: Vec<Conv2d>,
    acts: Vec<PRelu>,
    depth_used: usize,
}

impl std::fmt::Debug for FrozenExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenExtractor").field("seed", &self.seed).finish_non_exhaustive()
    }
}

impl Clone for FrozenExtractor {
    fn clone(&self) -> Self {
        build_frozen_extractor(self.seed)
    }
}

pub fn build_frozen_extractor(seed: u64) -> FrozenExtractor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut acts = Vec::new();
    for l in 0..3 {
        let (cin, cout) = (EXTRACTOR_CHANNELS[l], EXTRACTOR_CHANNELS[l + 1]);
        let mut c = conv(&format!("phi.conv{}", l + 1), 3, cin, cout, 1, 2, &mut rng)
            .expect("extractor geometry is valid");
        let std = (1.0 / (9 * cin) as f32).sqrt();
        c.weight.value = Tensor::randn(c.weight.value.shape(), std, &mut rng);
        convs.push(c);
        if l < 2 {
            acts.push(PRelu::new(&format!("phi.act{}", l + 1), cout));
        }
    }
    FrozenExtractor { seed, convs, acts, depth_used: 0 }
}

impl FrozenExtractor {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for c in &self.convs {
            p.extend(c.params());
        }
        for a in &self.acts {
            p.extend(a.params());
        }
        p
    }

    /// Output channels after `depth` convolutions.
    pub fn channels(depth: usize) -> usize {
        EXTRACTOR_CHANNELS[depth]
    }

    /// Features after convolution `depth` (1..=3).
    pub fn features(&mut self, x: &Tensor, depth: usize) -> Result<Tensor> {
        if !(1..=3).contains(&depth) {
            return Err(Error::Config(format!("extractor depth {depth} not in 1..=3")));
        }
        let mut h = x.clone();
        for l in 0..depth {
            if l > 0 {
                h = self.acts[l - 1].forward(&h)?;
            }
            h = self.convs[l].forward(&h)?;
        }
        self.depth_used = depth;
        Ok(h)
    }

    /// Gradient with respect to the input of the last `features` call.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if self.depth_used == 0 {
            return Err(Error::State("extractor: backward called before forward".into()));
        }
        let mut g = grad.clone();
        for l in (0..self.depth_used).rev() {
            g = self.convs[l].backward(&g)?;
            if l > 0 {
                g = self.acts[l - 1].backward(&g)?;
            }
        }
        for c in &mut self.convs {
            c.zero_grad();
        }
        for a in &mut self.acts {
            a.zero_grad();
        }
        self.depth_used = 0;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::generator_cost;
    use crate::searchspace::{SpaceKind, OPS};
    use rand::Rng;

    fn chain(op: usize) -> Genome {
        let nodes: Vec<(usize, usize)> = (0..10).map(|i| (op, i)).collect();
        Genome::generator_from_nodes(&nodes).unwrap()
    }

    fn random_genome(rng: &mut ChaCha8Rng) -> Genome {
        let nodes: Vec<(usize, usize)> = (0..10).map(|i| (rng.random_range(0..16), rng.random_range(0..=i))).collect();
        Genome::generator_from_nodes(&nodes).unwrap()
    }

    #[test]
    fn generator_upscales_8_to_16() {
        let mut g = build_generator(&chain(1), 16, 2, GeneratorInit::random(0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        assert_eq!(g.forward(&x).unwrap().shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn generator_params_match_cost_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scale in [2, 4] {
            for _ in 0..8 {
                let genome = random_genome(&mut rng);
                let net = build_generator(&genome, 16, scale, GeneratorInit::random(1)).unwrap();
                let report = generator_cost(&net.cell, 16, scale, (64, 64)).unwrap();
                assert_eq!(net.num_params() as u64, report.params);
            }
        }
    }

    #[test]
    fn node_shapes_match_built_nodes() {
        for op in OPS {
            let nodes: Vec<(usize, usize)> = (0..10).map(|i| (op.index(), i)).collect();
            let g = Genome::generator_from_nodes(&nodes).unwrap();
            let net = build_generator(&g, 16, 2, GeneratorInit::random(0)).unwrap();
            let snap = net.node_snapshot(3);
            let shapes: Vec<(String, Vec<usize>)> =
                snap.tensors.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
            let mut expected = node_param_shapes(op, 16);
            expected.sort();
            assert_eq!(shapes, expected, "{op}");
        }
    }

    #[test]
    fn cache_hit_loads_node_bit_identically() {
        let genome = chain(1);
        let donor = build_generator(&genome, 16, 2, GeneratorInit::random(99)).unwrap();
        let cache = WeightCache::new(16);
        let w = donor.node_snapshot(3);
        cache.commit(3, OpKind::Conv { k: 3 }, w.clone(), 30.0, 1).unwrap();
        let net = build_generator(&genome, 16, 2, GeneratorInit { seed: 7, cache: Some(&cache), snapshot: None }).unwrap();
        assert_eq!(net.node_snapshot(3), w);
        assert_ne!(net.node_snapshot(2), donor.node_snapshot(2));
    }

    #[test]
    fn x4_loads_x2_snapshot_partially() {
        let genome = chain(0);
        let x2 = build_generator(&genome, 16, 2, GeneratorInit::random(3)).unwrap();
        let snap = x2.snapshot();
        let x4 = build_generator(&genome, 16, 4, GeneratorInit { seed: 4, cache: None, snapshot: Some(&snap) }).unwrap();
        let s4 = x4.snapshot();
        assert_eq!(s4.tensors["up1.weight"], snap.tensors["up1.weight"]);
        assert_eq!(s4.tensors["tail.weight"], snap.tensors["tail.weight"]);
        assert!(s4.tensors.contains_key("up2.weight"));
    }

    #[test]
    fn discriminator_flatten_dim() {
        let g = Genome::new(SpaceKind::Discriminator, vec![1, 1, 0, 0, 15, 4, 13, 2, 7, 6]).unwrap();
        let mut d = build_discriminator(&g, 16, 0, 64, 0).unwrap();
        assert_eq!(d.flat_features(), 2048);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng);
        let y = d.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert!(y.is_finite());
    }

    #[test]
    fn discriminator_rejects_patch_24() {
        let g = Genome::new(SpaceKind::Discriminator, vec![0; 10]).unwrap();
        assert!(matches!(build_discriminator(&g, 16, 64, 24, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn extractor_is_deterministic() {
        let mut a = build_frozen_extractor(11);
        let b = build_frozen_extractor(11);
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value, q.value);
        }
        let x = Tensor::full(&[1, 3, 48, 48], 0.3);
        assert_eq!(a.features(&x, 3).unwrap().shape(), &[1, 32, 6, 6]);
    }

    #[test]
    fn extractor_seeds_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng);
        let fa = build_frozen_extractor(1).features(&x, 2).unwrap();
        let fb = build_frozen_extractor(2).features(&x, 2).unwrap();
        assert_ne!(fa, fb);
    }
}
