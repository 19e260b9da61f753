//! Spot checks of the unit/property suite through the public API, each
//! against an independent oracle or an exact identity.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isggen_core::adversary::{gan_loss, Side};
use isggen_core::crn::{make_context, Crn, CrnConfig, GenContext};
use isggen_core::gcn::{Gcn, GcnConfig};
use isggen_core::layoutnet::{compose, ObjectLayout};
use isggen_core::losses::{perceptual_loss, pixel_loss, PerceptualExtractor};
use isggen_core::metrics::inception_score;
use isggen_core::nn::{Init, ParamStore};
use isggen_core::sgraph::{
    deserialize_sequence, infer_relation, make_splits, serialize_sequence, Edge, Node, ABOVE, BELOW, INSIDE, LEFT_OF, RIGHT_OF, SURROUNDING,
};
use isggen_core::{BBox, NodeId, SceneGraph, Tensor, Var, Vocabulary};

type Check = Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x0, y0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
    BBox::new(x0, y0, rng.random_range(x0 + 0.05..=1.0), rng.random_range(y0 + 0.05..=1.0)).unwrap()
}

/// The relation table written out independently: containment first, then
/// the larger centre offset, horizontal on ties.
fn relation_oracle(s: &BBox, o: &BBox) -> usize {
    let a = s.to_array();
    let b = o.to_array();
    let within = |p: [f64; 4], q: [f64; 4]| p[0] >= q[0] && p[1] >= q[1] && p[2] <= q[2] && p[3] <= q[3] && p != q;
    if within(a, b) {
        return INSIDE;
    }
    if within(b, a) {
        return SURROUNDING;
    }
    let dx = (a[0] + a[2]) / 2.0 - (b[0] + b[2]) / 2.0;
    let dy = (a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0;
    match (dx.abs() >= dy.abs(), dx > 0.0, dy < 0.0) {
        (true, true, _) => RIGHT_OF,
        (true, false, _) => LEFT_OF,
        (false, _, true) => ABOVE,
        (false, _, false) => BELOW,
    }
}

fn relations() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let got = infer_relation(&a, &b).map_err(|e| e.to_string())?;
        ensure(got == relation_oracle(&a, &b), || format!("pair {i}: {a:?} vs {b:?} gave {got}"))?;
    }
    Ok(())
}

fn vocab() -> Vocabulary {
    Vocabulary::new((0..4).map(|i| format!("c{i}")).collect(), vec![]).unwrap()
}

fn random_graph(n: u32, seed: u64) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n).map(|i| Node { id: NodeId(i * 3 + 1), category: rng.random_range(0..4) }).collect();
    let mut edges = BTreeSet::new();
    for _ in 0..2 * n {
        let (s, o) = (rng.random_range(0..n), rng.random_range(0..n));
        if s != o {
            edges.insert(Edge { subject: NodeId(s * 3 + 1), predicate: rng.random_range(0..6), object: NodeId(o * 3 + 1) });
        }
    }
    SceneGraph::new(nodes, edges.into_iter().collect()).unwrap()
}

fn splits_and_serialization() -> Check {
    let v = vocab();
    for seed in 0..20 {
        let g = random_graph(3 + (seed as u32 % 6), seed);
        let seq = make_splits(&g, seed).map_err(|e| e.to_string())?;
        ensure(seq.last() == Some(&g), || format!("seed {seed}: last step is not the full graph"))?;
        for w in seq.steps().windows(2) {
            ensure(w[0].is_subgraph_of(&w[1]), || format!("seed {seed}: steps are not monotone"))?;
        }
        for step in seq.steps() {
            ensure(*step == g.induced_subgraph(&step.node_ids()), || format!("seed {seed}: step is not an induced subgraph"))?;
        }
        let text = serialize_sequence(&seq, &v).map_err(|e| e.to_string())?;
        let back = deserialize_sequence(&text, &v).map_err(|e| e.to_string())?;
        ensure(back == seq, || format!("seed {seed}: sequence document does not round-trip"))?;
    }
    Ok(())
}

fn gcn_properties() -> Check {
    let mut store = ParamStore::new();
    let d = 6;
    let gcn = Gcn::new(&mut store, &mut Init::new(2), &GcnConfig { embed_dim: d, num_layers: 2, hidden_dim: 8 }, 4, 6);
    let p = store.bind(false);
    let g = random_graph(6, 9);
    let base = gcn.embed(&p, &g).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let mut nodes = g.nodes().to_vec();
        let mut edges = g.edges().to_vec();
        for i in (1..nodes.len()).rev() {
            nodes.swap(i, rng.random_range(0..=i));
        }
        edges.reverse();
        let out = gcn.embed(&p, &SceneGraph::new(nodes, edges).unwrap()).map_err(|e| e.to_string())?;
        for n in g.nodes() {
            let (a, b) = (base.vector(n.id).unwrap(), out.vector(n.id).unwrap());
            let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            ensure(err <= 1e-5, || format!("permutation {trial}: node {} moved by {err}", n.id))?;
        }
    }
    // An isolated node is exactly its category embedding.
    let mut with_isolated = g.clone();
    with_isolated.add_node(Node { id: NodeId(1000), category: 3 }).unwrap();
    let emb = gcn.embed(&p, &with_isolated).map_err(|e| e.to_string())?;
    let table = store.get("gcn.category_embedding").ok_or("no category embedding table")?;
    ensure(emb.vector(NodeId(1000)).unwrap() == &table.data()[3 * d..4 * d], || "isolated node was transformed".into())
}

fn object(rng: &mut ChaCha8Rng, id: u32, bbox: [f64; 4], d: usize) -> ObjectLayout {
    ObjectLayout {
        node_id: NodeId(id),
        bbox: Var::constant(Tensor::new(vec![4], bbox.to_vec()).unwrap()),
        mask: Var::constant(Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0))),
        embedding: Var::constant(Tensor::from_fn(&[1, d], |_| rng.random_range(-1.0..1.0))),
    }
}

fn layout_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let objs: Vec<_> = (0..4)
        .map(|i| {
            let (x0, y0) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
            object(&mut rng, i, [x0, y0, x0 + 0.4, y0 + 0.45], 3)
        })
        .collect();
    let all = compose(&objs, 3, 16);
    let split = compose(&objs[..2], 3, 16).add(&compose(&objs[2..], 3, 16));
    let additivity = all.value().max_abs_diff(split.value());
    ensure(additivity < 1e-12, || format!("composition is not additive: {additivity}"))?;
    let mut rev = objs.clone();
    rev.reverse();
    let order = all.value().max_abs_diff(compose(&rev, 3, 16).value());
    ensure(order < 1e-9, || format!("composition depends on object order: {order}"))?;

    // Support: a box covering columns 4..8 and rows 8..16 of a 16x16 canvas.
    let o = object(&mut rng, 0, [0.25, 0.5, 0.5, 1.0], 2);
    let map = compose(&[o], 2, 16);
    for c in 0..2 {
        for i in 0..16 {
            for j in 0..16 {
                let inside = (4..8).contains(&j) && (8..16).contains(&i);
                let x = map.value().data()[c * 256 + i * 16 + j];
                ensure(inside || x == 0.0, || format!("layout leaks outside its box at ({i}, {j})"))?;
            }
        }
    }
    Ok(())
}

fn crn_injection() -> Check {
    let cfg = CrnConfig { start_resolution: 4, output_resolution: 16, channels: vec![6, 4], noise_channels: 5 };
    let mut store = ParamStore::new();
    let crn = Crn::new(&mut store, &mut Init::new(11), &cfg, 3);
    let p = store.bind(false);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = Var::constant(Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(-1.0..1.0)));
    let prev = Var::constant(Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(-1.0..1.0)));
    let plane = 256;
    let generate = |ctx: &GenContext| crn.generate(&p, &layout, ctx).map(|v| v.value().clone()).map_err(|e| e.to_string());

    let base = make_context(&cfg, Some(prev), 9).map_err(|e| e.to_string())?;
    let reference = generate(&base)?;
    let mut shadowed = base.clone();
    shadowed.noise.data_mut()[..3 * plane].iter_mut().for_each(|x| *x += 1.5);
    ensure(generate(&shadowed)? == reference, || "noise under the injected image still reaches the output".into())?;
    let mut free = base.clone();
    free.noise.data_mut()[3 * plane..].iter_mut().for_each(|x| *x += 1.5);
    ensure(generate(&free)?.max_abs_diff(&reference) > 1e-3, || "remaining noise channels are not wired".into())?;
    let mut bare = make_context(&cfg, None, 9).map_err(|e| e.to_string())?;
    let bare_ref = generate(&bare)?;
    bare.noise.data_mut()[..3 * plane].iter_mut().for_each(|x| *x += 1.5);
    ensure(generate(&bare)?.max_abs_diff(&bare_ref) > 1e-3, || "without injection the first noise channels are ignored".into())
}

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Var::constant(Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(-1.0..1.0)));
    let err = |e: isggen_core::Error| e.to_string();
    ensure(pixel_loss(&x, &x).map_err(err)?.item() == 0.0, || "pixel(x, x) != 0".into())?;
    let extractor = PerceptualExtractor::default();
    ensure(perceptual_loss(&x, &x, &extractor).map_err(err)?.item() == 0.0, || "perceptual(x, x) != 0".into())?;

    let c = 9;
    let uniform = vec![vec![1.0 / c as f64; c]; 40];
    let (is_uniform, _) = inception_score(&uniform, 10).map_err(err)?;
    ensure((is_uniform - 1.0).abs() < 1e-12, || format!("IS of uniform posteriors is {is_uniform}"))?;
    let one_hot: Vec<Vec<f64>> = (0..4 * c).map(|i| (0..c).map(|j| f64::from(u8::from(i % c == j))).collect()).collect();
    let (is_one_hot, _) = inception_score(&one_hot, 4).map_err(err)?;
    ensure((is_one_hot - c as f64).abs() < 1e-9, || format!("IS of one-hot posteriors is {is_one_hot}"))?;

    // Logit 0 is D = 0.5 on both real and fake.
    let zeros = Var::constant(Tensor::zeros(&[1, 8, 8]));
    let d = gan_loss(Some(&zeros), Some(&zeros), Side::Discriminator).item();
    ensure((d - 2.0 * 2f64.ln()).abs() < 1e-12, || format!("discriminator loss at D = 0.5 is {d}"))
}

/// Run every property group; returns the names that were checked.
pub fn run() -> Result<String, String> {
    let groups: [(&str, fn() -> Check); 6] = [
        ("relation oracle (200 pairs)", relations),
        ("split monotonicity + round-trips", splits_and_serialization),
        ("gcn equivariance + isolated nodes", gcn_properties),
        ("layout additivity/permutation/support", layout_properties),
        ("crn noise-channel injection", crn_injection),
        ("analytic loss identities", loss_identities),
    ];
    let mut failures = Vec::new();
    for (name, f) in &groups {
        if let Err(e) = f() {
            failures.push(format!("{name}: {e}"));
        }
    }
    if failures.is_empty() {
        Ok(groups.iter().map(|g| g.0).collect::<Vec<_>>().join("; "))
    } else {
        Err(failures.join("; "))
    }
}
