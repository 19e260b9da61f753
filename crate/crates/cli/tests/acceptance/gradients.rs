//! Central finite-difference checks of the differentiable components.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isggen_core::crn::{make_context, Crn, CrnConfig, GenContext};
use isggen_core::gcn::{Gcn, GcnConfig};
use isggen_core::gradcheck;
use isggen_core::layoutnet::{box_loss, compose, mask_loss, ObjectLayout};
use isggen_core::losses::{perceptual_loss, pixel_loss, PerceptualExtractor};
use isggen_core::nn::{Init, ParamStore};
use isggen_core::sgraph::{Edge, Node};
use isggen_core::{BBox, NodeId, SceneGraph, Tensor, Var};

const EPS: f64 = 1e-6;
const TOLERANCE: f64 = 1e-3;
const BUDGET: Duration = Duration::from_secs(120);

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn gcn_edge_mlp() -> f64 {
    let mut store = ParamStore::new();
    let gcn = Gcn::new(&mut store, &mut Init::new(7), &GcnConfig { embed_dim: 6, num_layers: 2, hidden_dim: 8 }, 4, 6);
    let nodes = (0..3).map(|i| Node { id: NodeId(i), category: i as usize }).collect();
    let edges = [(0, 0, 1), (1, 3, 2), (2, 4, 0)]
        .iter()
        .map(|&(s, p, o)| Edge { subject: NodeId(s), predicate: p, object: NodeId(o) })
        .collect();
    let g = SceneGraph::new(nodes, edges).unwrap();
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).filter(|k| k.contains("layer0")).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let probe = random(&[3, 6], 1, 1.0);
    let f = |vars: &[Var]| {
        let bound = names.iter().zip(vars).fold(store.bind(false), |b, (n, v)| b.with(n, v.clone()));
        gcn.embed(&bound, &g).unwrap().vectors().mul_const(&probe).sum()
    };
    gradcheck::check(&inputs, &f, EPS).max_relative_error()
}

fn layout_compose_and_losses() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let masks = Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(0.05..0.95));
    let embs = random(&[2, 3], 2, 1.0);
    let boxes = Tensor::new(vec![2, 4], vec![0.113, 0.091, 0.617, 0.583, 0.331, 0.417, 0.889, 0.953]).unwrap();
    let probe = random(&[3, 10, 10], 3, 1.0);
    let objects = |m: &Var, b: &Var, e: Option<&Var>| -> Vec<ObjectLayout> {
        (0..2)
            .map(|i| ObjectLayout {
                node_id: NodeId(i as u32),
                bbox: b.narrow(0, i, 1).reshape(&[4]),
                mask: m.narrow(0, i, 1).reshape(&[6, 6]),
                embedding: e.map_or_else(|| Var::constant(Tensor::zeros(&[1, 3])), |e| e.narrow(0, i, 1)),
            })
            .collect()
    };
    let f = |v: &[Var]| compose(&objects(&v[0], &v[2], Some(&v[1])), 3, 10).mul_const(&probe).sum();
    let compose_err = gradcheck::check(&[masks.clone(), embs, boxes.clone()], &f, EPS).max_relative_error();

    let box_targets: BTreeMap<_, _> =
        [(NodeId(0), BBox::new(0.2, 0.2, 0.4, 0.5).unwrap()), (NodeId(1), BBox::new(0.3, 0.3, 0.9, 0.9).unwrap())].into();
    let mask_targets: BTreeMap<_, _> = (0..2).map(|i| (NodeId(i), Tensor::from_fn(&[6, 6], |j| ((j + i as usize) % 2) as f64))).collect();
    let g = |v: &[Var]| {
        let objs = objects(&v[0], &v[1], None);
        box_loss(&objs, &box_targets).unwrap().add(&mask_loss(&objs, &mask_targets).unwrap())
    };
    compose_err.max(gradcheck::check(&[masks, boxes], &g, EPS).max_relative_error())
}

fn image_losses() -> f64 {
    let extractor = PerceptualExtractor::default();
    let target = random(&[3, 8, 8], 6, 1.0);
    let f = |v: &[Var]| pixel_loss(&v[0], &Var::constant(target.clone())).unwrap();
    let pixel = gradcheck::check(&[random(&[3, 8, 8], 7, 1.0)], &f, EPS).max_relative_error();
    let g = |v: &[Var]| perceptual_loss(&v[0], &v[1], &extractor).unwrap();
    pixel.max(gradcheck::check(&[random(&[3, 8, 8], 8, 1.0), target.clone()], &g, EPS).max_relative_error())
}

fn crn_end_to_end() -> f64 {
    let cfg = CrnConfig { start_resolution: 4, output_resolution: 8, channels: vec![3], noise_channels: 3 };
    let mut store = ParamStore::new();
    let crn = Crn::new(&mut store, &mut Init::new(4), &cfg, 2);
    let ctx = make_context(&cfg, None, 2).unwrap();
    let probe = random(&[3, 8, 8], 14, 1.0);
    let w0 = store.get("crn.module0.conv0.weight").unwrap().clone();
    let rgb = store.get("crn.final.rgb.weight").unwrap().clone();
    let f = |v: &[Var]| {
        let p = store
            .bind(false)
            .with("crn.module0.conv0.weight", v[1].clone())
            .with("crn.final.rgb.weight", v[2].clone());
        let ctx = GenContext { previous_image: Some(v[3].clone()), ..ctx.clone() };
        crn.generate(&p, &v[0], &ctx).unwrap().mul_const(&probe).sum()
    };
    gradcheck::check(&[random(&[2, 8, 8], 15, 1.0), w0, rgb, random(&[3, 8, 8], 13, 0.8)], &f, EPS).max_relative_error()
}

pub fn run() -> Result<String, String> {
    let start = Instant::now();
    let checks: [(&str, fn() -> f64); 4] = [
        ("gcn edge MLP", gcn_edge_mlp),
        ("layout compose + box/mask losses", layout_compose_and_losses),
        ("pixel + perceptual losses", image_losses),
        ("crn end to end at 8x8", crn_end_to_end),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, f) in checks {
        let err = f();
        ok &= err <= TOLERANCE;
        lines.push(format!("{name} {err:.1e}"));
    }
    let elapsed = start.elapsed();
    let summary = format!("max rel. err: {}; {:.1}s", lines.join(", "), elapsed.as_secs_f64());
    if ok && elapsed < BUDGET {
        Ok(summary)
    } else {
        Err(summary)
    }
}
