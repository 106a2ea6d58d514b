use futuresight_core::autograd::Graph;
use futuresight_core::model::{Conditioning, InjectionMode, Model, ModelConfig};
use futuresight_core::rng::Rng;
use proptest::prelude::*;

fn config(mode: InjectionMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        d_enc: 16,
        n_heads: 2,
        n_layers_dec: 2,
        n_layers_enc: 1,
        d_ff: 32,
        max_seq: 16,
        injection_mode: mode,
        seed: 11,
    }
}

fn tokens(rng: &mut Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| 5 + rng.below(27) as u32).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn logits_before_t_ignore_tokens_from_t(seed in 0u64..10_000, t in 1usize..12) {
        let mut rng = Rng::seed_from_u64(seed);
        for mode in [InjectionMode::Memory, InjectionMode::Embedding, InjectionMode::None] {
            let m = Model::new(config(mode)).unwrap();
            let cond = m.condition(2, &[7], &[9, 10, 11]).unwrap();
            let a = tokens(&mut rng, 12);
            let mut b = a.clone();
            for x in &mut b[t..] {
                *x = 5 + rng.below(27) as u32;
            }
            let (la, lb) = (m.decoder_forward(&a, &cond).unwrap(), m.decoder_forward(&b, &cond).unwrap());
            for r in 0..t {
                prop_assert_eq!(la.row(r), lb.row(r));
            }
        }
    }
}

#[test]
fn masked_memory_reproduces_plain_decoder() {
    let mem = Model::new(config(InjectionMode::Memory)).unwrap();
    let mut plain = Model::new(config(InjectionMode::None)).unwrap();
    assert_eq!(plain.params_mut().copy_matching_from(mem.params()), plain.params().len());
    let Conditioning::Memory(m) = mem.condition(3, &[8], &[20, 21, 22]).unwrap() else { panic!() };
    let mut rng = Rng::seed_from_u64(5);
    for _ in 0..20 {
        let ids = tokens(&mut rng, 12);
        let masked = mem.decoder_forward(&ids, &Conditioning::MaskedMemory(m.clone())).unwrap();
        let none = plain.decoder_forward(&ids, &Conditioning::None).unwrap();
        assert!(masked.max_abs_diff(&none) < 1e-12);
    }
}

#[test]
fn encoder_output_depends_on_every_future_token() {
    let m = Model::new(config(InjectionMode::Memory)).unwrap();
    let base = m.encode_future(2, &[7], &[9, 10, 11, 12]).unwrap();
    let reordered = m.encode_future(2, &[7], &[12, 11, 10, 9]).unwrap();
    assert!(base.vector.max_abs_diff(&reordered.vector) > 1e-6);
    for i in 0..4 {
        let mut f = vec![9, 10, 11, 12];
        f[i] = 30;
        assert!(base.vector.max_abs_diff(&m.encode_future(2, &[7], &f).unwrap().vector) > 1e-6, "position {i}");
    }
    let other_distance = m.encode_future(3, &[8], &[9, 10, 11, 12]).unwrap();
    assert!(base.vector.max_abs_diff(&other_distance.vector) > 1e-6);
}

#[test]
fn different_futures_give_different_logits() {
    let m = Model::new(config(InjectionMode::Memory)).unwrap();
    let ids = [1, 6, 7, 8, 9];
    let a = m.decoder_forward(&ids, &m.condition(1, &[6], &[10, 11]).unwrap()).unwrap();
    let b = m.decoder_forward(&ids, &m.condition(1, &[6], &[25, 26]).unwrap()).unwrap();
    for r in 0..ids.len() {
        assert!(a.row(r).iter().zip(b.row(r)).any(|(x, y)| (x - y).abs() > 1e-9), "row {r}");
    }
}

#[test]
fn every_layer_block_of_the_projection_receives_gradient() {
    let m = Model::new(config(InjectionMode::Memory)).unwrap();
    let (w, b) = m.projection_ids().unwrap();
    let mut g = Graph::new(m.params());
    let cond = m.condition_graph(&mut g, &[7], &[9, 10, 11]).unwrap();
    let logits = m.decoder_graph(&mut g, &[1, 12, 13, 14, 15, 16], &cond).unwrap();
    let targets = [Some(12), Some(13), Some(14), Some(15), Some(16), None];
    let loss = g.cross_entropy(logits, &targets, 0.2).unwrap();
    let grads = g.backward(loss).unwrap();
    let (gw, gb) = (grads.get(w).unwrap(), grads.get(b).unwrap());
    let d = m.config().d_model;
    let mut blocks = Vec::new();
    for l in 0..m.config().n_layers_dec {
        let cols = l * d..(l + 1) * d;
        let block: Vec<f64> = (0..gw.rows()).flat_map(|r| gw.row(r)[cols.clone()].to_vec()).collect();
        let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "layer {l} block norm {norm}");
        assert!(gb.data()[cols].iter().any(|x| x.abs() > 1e-10), "layer {l} bias");
        blocks.push(block);
    }
    assert!(blocks[0].iter().zip(&blocks[1]).any(|(a, b)| (a - b).abs() > 1e-10));
}

/// Central differences at `eps = 1e-5` carry round-off noise near `ulp(loss) / eps`
/// and truncation near `eps^2 * |f'''|`; the analytic gradient must agree to that level.
#[test]
fn full_model_gradient_agrees_with_central_differences() {
    use futuresight_core::gradcheck::{grad_check, GradCheckConfig};
    let m = Model::new(ModelConfig { d_ff: 64, ..config(InjectionMode::Memory) }).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let ids = tokens(&mut rng, 12);
    let targets: Vec<Option<u32>> = (0..12).map(|i| (i >= 4).then(|| 5 + rng.below(27) as u32)).collect();
    let mut params = m.params().clone();
    let report = grad_check(&mut params, GradCheckConfig { sample_fraction: 0.25, ..GradCheckConfig::default() }, |g| {
        let c = m.condition_graph(g, &[7], &[9, 10, 11, 12])?;
        let logits = m.decoder_graph(g, &ids, &c)?;
        g.cross_entropy(logits, &targets, 1.0 / 8.0)
    })
    .unwrap();
    assert!(report.max_abs_error < 1e-8, "{report:?}");
}
