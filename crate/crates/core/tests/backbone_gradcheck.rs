use focdec::backbone::Backbone;
use focdec::model::{BackboneConfig, FeatureLevel};
use focdec::nn::{Graph, ParamStore};
use focdec::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p2_sum<'p>(bb: &Backbone, p: &'p ParamStore<f64>, x: &Tensor<f64>) -> (Graph<'p, f64>, focdec::nn::NodeId) {
    let mut g = Graph::new(p);
    let input = g.input(x.clone());
    let feats = bb.forward(&mut g, input, &[FeatureLevel::P2]).unwrap();
    let loss = g.sum_all(feats[&FeatureLevel::P2]);
    (g, loss)
}

#[test]
fn p2_sum_gradients_match_finite_differences() {
    let cfg = BackboneConfig {
        base_channels: 2,
        fpn_channels: 4,
        num_down_levels: 4,
        leaky_slope: 0.01,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = ParamStore::<f64>::default();
    let bb = Backbone::new(&cfg, 6, &mut p, &mut rng).unwrap();
    // non-trivial affine norm parameters and biases
    for id in p.ids().collect::<Vec<_>>() {
        if p.get(id).shape().len() == 1 {
            for v in p.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let x = Tensor::from_vec(&[1, 16, 16, 24], (0..16 * 16 * 24).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let grads = {
        let (g, loss) = p2_sum(&bb, &p, &x);
        g.backward(loss).unwrap()
    };
    let h = 1e-5;
    let mut checked = 0;
    for id in p.ids().collect::<Vec<_>>() {
        let name = p.name(id).to_string();
        // levels above P2 do not feed the P2 output
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.get(id).len()]);
        for _ in 0..5 {
            let k = rng.gen_range(0..analytic.len());
            let orig = p.get(id).data()[k];
            p.get_mut(id).data_mut()[k] = orig + h;
            let up = {
                let (g, l) = p2_sum(&bb, &p, &x);
                g.value(l).data()[0]
            };
            p.get_mut(id).data_mut()[k] = orig - h;
            let down = {
                let (g, l) = p2_sum(&bb, &p, &x);
                g.value(l).data()[0]
            };
            p.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "{name}[{k}]: analytic {} numeric {numeric}", analytic[k]);
            checked += 1;
        }
    }
    assert!(checked >= 5 * 20);
}
