mod common;

use common::{gradcheck, layer_zoo, GradReport};
use srnas::tensorkit::{Layer, Sigmoid, Tensor};

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..20 {
        for mut e in layer_zoo(seed) {
            let name = &e.name;
            let report: GradReport = gradcheck(e.layer.as_mut(), &e.input, e.step, seed, 24);
            eprintln!("seed {seed} {name}: max_rel {:.2e} elem {:.2e} ({} checked) {}", report.max_rel, report.max_elem, report.checked, report.worst);
            assert!(report.max_rel <= 1e-3, "{name} seed {seed}: {}", report.worst);
        }
    }
}

/// Wraps a layer and scales its input gradient, as a broken backward would.
struct Skewed<L>(L, f32);

impl<L: Layer> Layer for Skewed<L> {
    fn forward(&mut self, x: &Tensor) -> srnas::Result<Tensor> {
        self.0.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> srnas::Result<Tensor> {
        Ok(self.0.backward(grad)?.scale(self.1))
    }
}

#[test]
fn harness_catches_a_one_percent_gradient_error() {
    let mut rng = common::rng(3);
    let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
    let mut layer = Skewed(Sigmoid::default(), 1.01);
    let report = gradcheck(&mut layer, &x, common::STEP_SMOOTH, 3, 24);
    assert!(report.max_rel > 5e-3, "{report:?}");
}
