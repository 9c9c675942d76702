//! Shared gradient cases; also run by the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rkf_core::distill::{desc_distill_loss, score_distill_loss, score_logit_distill_loss};
use rkf_core::net::{joint_loss, sample_correspondence_features, Model, ModelConfig, Variant};
use rkf_core::rkf::RkfLayer;
use rkf_core::tensor::{
    avg_pool2, avg_pool2_backward, bilinear_sample, bilinear_sample_backward, conv2d, conv2d_backward,
    l2_normalize_channels, l2_normalize_channels_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    soft_clamp, soft_clamp_backward, ConvKernel, Padding, Shape, Tensor,
};

const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;

fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn numeric(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + H;
            let up = f(&p);
            p[i] = x[i] - H;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Worst relative error seen per checked quantity.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checks: Vec<(String, f64)>,
}

impl GradReport {
    fn check(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len(), "{name}: length");
        let worst = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
            .fold(0.0, f64::max);
        self.checks.push((name.to_string(), worst));
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.1).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&(String, f64)> {
        self.checks.iter().filter(|c| !(c.1 <= REL_TOL)).collect()
    }
}

fn with_data(shape: Shape, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

pub fn conv2d_all_paddings(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (padding, k) in [(Padding::SameZero, 3), (Padding::Valid, 3), (Padding::SameZero, 5)] {
        let x = rand_tensor(Shape::new(2, 2, 6, 7), &mut rng, -1.0, 1.0);
        let w = rand_tensor(Shape::new(3, 2, k, k), &mut rng, -1.0, 1.0);
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kern = ConvKernel::new(w.clone(), b.clone()).unwrap();
        let g = rand_tensor(conv2d(&x, &kern, padding).unwrap().shape(), &mut rng, -1.0, 1.0);
        let grads = conv2d_backward(&x, &kern, &g, padding).unwrap();

        let loss_x = |d: &[f64]| dot(&conv2d(&with_data(x.shape(), d), &kern, padding).unwrap(), &g);
        report.check("conv input", grads.input.data(), &numeric(x.data(), loss_x));
        let loss_w = |d: &[f64]| {
            let k = ConvKernel::new(with_data(w.shape(), d), b.clone()).unwrap();
            dot(&conv2d(&x, &k, padding).unwrap(), &g)
        };
        report.check("conv weights", grads.weights.data(), &numeric(w.data(), loss_w));
        let loss_b = |d: &[f64]| {
            let k = ConvKernel::new(w.clone(), d.to_vec()).unwrap();
            dot(&conv2d(&x, &k, padding).unwrap(), &g)
        };
        report.check("conv bias", &grads.bias, &numeric(&b, loss_b));
    }
}

pub fn avg_pool(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(Shape::new(1, 3, 6, 8), &mut rng, -1.0, 1.0);
    let g = rand_tensor(avg_pool2(&x).unwrap().shape(), &mut rng, -1.0, 1.0);
    let analytic = avg_pool2_backward(x.shape(), &g).unwrap();
    let loss = |d: &[f64]| dot(&avg_pool2(&with_data(x.shape(), d)).unwrap(), &g);
    report.check("avg_pool2", analytic.data(), &numeric(x.data(), loss));
}

pub fn relu_away_from_kink(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(Shape::new(1, 2, 5, 5), &mut rng, -1.0, 1.0).map(|v| if v.abs() < 0.01 { 0.5 } else { v });
    let g = rand_tensor(x.shape(), &mut rng, -1.0, 1.0);
    let analytic = relu_backward(&x, &g).unwrap();
    let loss = |d: &[f64]| dot(&relu(&with_data(x.shape(), d)), &g);
    report.check("relu", analytic.data(), &numeric(x.data(), loss));
}

pub fn l2_normalize(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(Shape::new(2, 5, 3, 4), &mut rng, -1.0, 1.0);
    let g = rand_tensor(x.shape(), &mut rng, -1.0, 1.0);
    let analytic = l2_normalize_channels_backward(&x, &g, 1e-8).unwrap();
    let loss = |d: &[f64]| dot(&l2_normalize_channels(&with_data(x.shape(), d), 1e-8), &g);
    report.check("l2_normalize", analytic.data(), &numeric(x.data(), loss));
}

pub fn score_squashing(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = rand_tensor(Shape::new(1, 1, 6, 6), &mut rng, -12.0, 12.0);
    let g = rand_tensor(z.shape(), &mut rng, -1.0, 1.0);
    let bound = 6.0;
    let u = soft_clamp(&z, bound);
    let s = sigmoid(&u);
    let analytic = soft_clamp_backward(&z, &sigmoid_backward(&s, &g).unwrap(), bound).unwrap();
    let loss = |d: &[f64]| dot(&sigmoid(&soft_clamp(&with_data(z.shape(), d), bound)), &g);
    report.check("sigmoid(soft_clamp)", analytic.data(), &numeric(z.data(), loss));
}

pub fn bilinear_sampling(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = rand_tensor(Shape::new(1, 3, 5, 6), &mut rng, -1.0, 1.0);
    let pts: Vec<(f64, f64)> = (0..7).map(|_| (rng.gen_range(0.0..5.0), rng.gen_range(0.0..4.0))).collect();
    let gs: Vec<Vec<f64>> = pts.iter().map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let analytic = bilinear_sample_backward(t.shape(), 0, &pts, &gs).unwrap();
    let loss = |d: &[f64]| {
        let v = bilinear_sample(&with_data(t.shape(), d), 0, &pts).unwrap();
        v.iter().zip(&gs).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum()
    };
    report.check("bilinear_sample", analytic.data(), &numeric(t.data(), loss));
}

pub fn rkf_layer_exact_and_bilinear(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [4, 3] {
        let w = rand_tensor(Shape::new(2, 2, 3, 3), &mut rng, -1.0, 1.0);
        let b = vec![0.3, -0.2];
        let layer = RkfLayer::new(ConvKernel::new(w.clone(), b.clone()).unwrap(), n).unwrap();
        let x = rand_tensor(Shape::new(1, 2, 6, 6), &mut rng, -1.0, 1.0);
        let g = rand_tensor(layer.forward(&x).unwrap().shape(), &mut rng, -1.0, 1.0);
        let grads = layer.backward(&x, &g).unwrap();
        let with_w = |d: &[f64]| RkfLayer::new(ConvKernel::new(with_data(w.shape(), d), b.clone()).unwrap(), n).unwrap();
        report.check("rkf base", grads.base.data(), &numeric(w.data(), |d| dot(&with_w(d).forward(&x).unwrap(), &g)));
        report.check(
            "rkf input",
            grads.input.data(),
            &numeric(x.data(), |d| dot(&layer.forward(&with_data(x.shape(), d)).unwrap(), &g)),
        );
        let with_b = |d: &[f64]| RkfLayer::new(ConvKernel::new(w.clone(), d.to_vec()).unwrap(), n).unwrap();
        report.check("rkf bias", &grads.bias, &numeric(&b, |d| dot(&with_b(d).forward(&x).unwrap(), &g)));
    }
}

fn flatten(m: &Model<f64>) -> Vec<f64> {
    m.layers()
        .iter()
        .flat_map(|l| l.kernel().weights().data().iter().chain(l.kernel().bias()).copied().collect::<Vec<_>>())
        .collect()
}

fn unflatten(m: &Model<f64>, p: &[f64]) -> Model<f64> {
    let mut m = m.clone();
    let mut it = p.iter();
    for l in m.layers_mut() {
        let k = l.kernel_mut();
        for v in k.weights_mut().data_mut() {
            *v = *it.next().unwrap();
        }
        for v in k.bias_mut() {
            *v = *it.next().unwrap();
        }
    }
    m
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        trunk: vec![3],
        head: 3,
        desc_dim: 4,
        r: 2,
        kernel: 3,
        variant,
    }
}

pub fn joint_loss_through_the_model(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for variant in [Variant::Base, Variant::Rkf { n_rotations: 4 }] {
        let a = rand_tensor(Shape::new(1, 1, 12, 12), &mut rng, 0.0, 1.0);
        let b = rand_tensor(Shape::new(1, 1, 12, 12), &mut rng, 0.0, 1.0);
        let mut model = Model::<f64>::init(tiny_config(variant), 9).unwrap();
        model.standardize(&[a.clone(), b.clone()]).unwrap();
        let coords: Vec<_> = (0..6)
            .map(|_| {
                let p = (rng.gen_range(0.5..10.5), rng.gen_range(0.5..10.5));
                (p, (rng.gen_range(0.5..10.5), rng.gen_range(0.5..10.5)))
            })
            .collect();
        let loss = |m: &Model<f64>| {
            let oa = m.forward_train(&a).unwrap().0;
            let ob = m.forward_train(&b).unwrap().0;
            let batch = sample_correspondence_features(&oa, &ob, &coords).unwrap();
            joint_loss(&batch, 1.0, 2.0).unwrap().value
        };
        let (oa, ca) = model.forward_train(&a).unwrap();
        let (ob, cb) = model.forward_train(&b).unwrap();
        let batch = sample_correspondence_features(&oa, &ob, &coords).unwrap();
        let jl = joint_loss(&batch, 1.0, 2.0).unwrap();
        assert!(jl.value > 0.0, "degenerate fixture");
        let fg = batch.backward(&jl).unwrap();
        let mut grads = model.backward(&ca, &oa, Some(&fg.desc_a), Some(&fg.score_a)).unwrap();
        grads.add_scaled(&model.backward(&cb, &ob, Some(&fg.desc_b), Some(&fg.score_b)).unwrap(), 1.0).unwrap();
        let analytic: Vec<f64> = grads.layers.iter().flat_map(|(w, b)| w.data().iter().chain(b).copied().collect::<Vec<_>>()).collect();
        let params = flatten(&model);
        report.check(variant.name(), &analytic, &numeric(&params, |p| loss(&unflatten(&model, p))));
    }
}

pub fn descriptor_distillation(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = l2_normalize_channels(&rand_tensor(Shape::new(1, 4, 3, 3), &mut rng, -1.0, 1.0), 1e-8);
    let s = rand_tensor(t.shape(), &mut rng, -1.0, 1.0);
    let (_, analytic) = desc_distill_loss(&s, &t).unwrap();
    let loss = |d: &[f64]| desc_distill_loss(&with_data(s.shape(), d), &t).unwrap().0;
    report.check("desc distill", analytic.data(), &numeric(s.data(), loss));
}

pub fn score_distillation(report: &mut GradReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = rand_tensor(Shape::new(1, 1, 8, 8), &mut rng, -3.0, 3.0);
    let s = rand_tensor(t.shape(), &mut rng, -3.0, 3.0);
    let (_, analytic) = score_distill_loss(&s, &t, 4).unwrap();
    let loss = |d: &[f64]| score_distill_loss(&with_data(s.shape(), d), &t, 4).unwrap().0;
    report.check("score distill", analytic.data(), &numeric(s.data(), loss));

    let t = rand_tensor(Shape::new(1, 1, 4, 4), &mut rng, 0.05, 0.95);
    let s = rand_tensor(t.shape(), &mut rng, 0.05, 0.95);
    let (_, analytic) = score_logit_distill_loss(&s, &t, 2).unwrap();
    let loss = |d: &[f64]| score_logit_distill_loss(&with_data(s.shape(), d), &t, 2).unwrap().0;
    report.check("score logit distill", analytic.data(), &numeric(s.data(), loss));
}

/// Every case, in a fixed order.
pub const ALL: [(&str, fn(&mut GradReport)); 10] = [
    ("conv2d", conv2d_all_paddings),
    ("avg_pool2", avg_pool),
    ("relu", relu_away_from_kink),
    ("l2_normalize", l2_normalize),
    ("score squashing", score_squashing),
    ("bilinear sampling", bilinear_sampling),
    ("rkf layer", rkf_layer_exact_and_bilinear),
    ("joint loss through the model", joint_loss_through_the_model),
    ("descriptor distillation", descriptor_distillation),
    ("score distillation", score_distillation),
];
