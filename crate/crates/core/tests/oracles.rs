//! Every layer and both models against plain scalar re-implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crowdtsc::autodiff::nn::{
    attention, conv_wgram, gru_step, max_pool, softmax_xent, Activation, AttentionParams, ConvParams, GruParams,
    Linear,
};
use crowdtsc::autodiff::{Graph, ParamId, ParamSet};
use crowdtsc::corpus::{TokenId, PAD};
use crowdtsc::kea::{KeywordMask, KeywordSlots};
use crowdtsc::models::{
    hdnn_forward, hdnn_loss, karnn_forward, karnn_loss, Hdnn, HdnnConfig, HdnnVariant, Karnn, KarnnConfig,
    TextBranch,
};
use crowdtsc::{EmbeddingTable, Example};

const TOL: f64 = 1e-12;

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn scramble(params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for t in params.iter_mut() {
        for x in &mut t.data {
            *x = rng.random_range(-0.7..0.7);
        }
    }
}

fn data(p: &ParamSet, id: ParamId) -> &[f64] {
    &p.get(id).data
}

/// `W x` for row-major `W` with `x.len()` columns.
fn mv(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(p: &ParamSet, l: &Linear, x: &[f64]) -> Vec<f64> {
    mv(data(p, l.w), x).iter().zip(data(p, l.b)).map(|(a, b)| a + b).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn gru_oracle(p: &ParamSet, g: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |w, u, b| -> Vec<f64> {
        let wx = mv(data(p, w), x);
        let uh = mv(data(p, u), h);
        (0..h.len()).map(|i| sig(wx[i] + uh[i] + data(p, b)[i])).collect()
    };
    let z = gate(g.w_z, g.u_z, g.b_z);
    let r = gate(g.w_r, g.u_r, g.b_r);
    let wx = mv(data(p, g.w_h), x);
    let uh = mv(data(p, g.u_h), h);
    (0..h.len())
        .map(|i| {
            let cand = (wx[i] + r[i] * uh[i] + data(p, g.b_h)[i]).tanh();
            (1.0 - z[i]) * h[i] + z[i] * cand
        })
        .collect()
}

fn attention_oracle(p: &ParamSet, a: &AttentionParams, hs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = hs
        .iter()
        .map(|h| {
            let u: Vec<f64> = mv(data(p, a.w_w), h)
                .iter()
                .zip(data(p, a.b_w))
                .map(|(x, b)| (x + b).tanh())
                .collect();
            u.iter().zip(data(p, a.u_w)).map(|(x, y)| x * y).sum()
        })
        .collect();
    let alpha = softmax(&scores);
    let mut v = vec![0.0; hs[0].len()];
    for (h, a) in hs.iter().zip(&alpha) {
        for (vi, hi) in v.iter_mut().zip(h) {
            *vi += a * hi;
        }
    }
    (alpha, v)
}

fn conv_oracle(p: &ParamSet, c: &ConvParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = data(p, c.w);
    let b = data(p, c.b);
    let d_in = xs[0].len();
    let cols = c.width * d_in;
    let mut out = Vec::new();
    for i in 0..=xs.len() - c.width {
        let mut row = Vec::new();
        for (o, bias) in b.iter().enumerate() {
            let mut s = *bias;
            for k in 0..c.width {
                for j in 0..d_in {
                    s += w[o * cols + k * d_in + j] * xs[i + k][j];
                }
            }
            row.push(s.max(0.0));
        }
        out.push(row);
    }
    out
}

fn column_max(rows: &[Vec<f64>]) -> Vec<f64> {
    (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn random_table(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingTable {
    EmbeddingTable::from_rows(dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rows(table: &EmbeddingTable, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    tokens.iter().map(|&t| table.row(t).to_vec()).collect()
}

#[test]
fn gru_step_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamSet::new();
    let gru = GruParams::register(&mut params, "gru", 3, 3, &mut rng);
    scramble(&mut params, &mut rng);
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new(&params);
    let xv = g.input(x.clone());
    let hv = g.input(h.clone());
    let out = gru_step(&mut g, xv, hv, &gru).unwrap();
    close(g.value(out), &gru_oracle(&params, &gru, &x, &h), TOL);
}

#[test]
fn attention_hand_instance() {
    // one-dimensional states with scores tanh(h) / tanh(1): 1 and 0
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = AttentionParams::register(&mut params, "att", 1, 1, &mut rng);
    params.get_mut(a.w_w).data = vec![1.0];
    params.get_mut(a.u_w).data = vec![1.0 / 1f64.tanh()];
    let mut g = Graph::new(&params);
    let hs = [g.input(vec![1.0]), g.input(vec![0.0])];
    let out = attention(&mut g, &hs, &a, Activation::Tanh).unwrap();
    let e = std::f64::consts::E;
    close(g.value(out.alpha), &[e / (e + 1.0), 1.0 / (e + 1.0)], TOL);
    close(g.value(out.context), &[e / (e + 1.0)], TOL);
}

#[test]
fn sigmoid_attention_activation() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = AttentionParams::register(&mut params, "att", 1, 1, &mut rng);
    params.get_mut(a.w_w).data = vec![2.0];
    params.get_mut(a.u_w).data = vec![1.0];
    let mut g = Graph::new(&params);
    let hs = [g.input(vec![0.5]), g.input(vec![-0.5])];
    let out = attention(&mut g, &hs, &a, Activation::Sigmoid).unwrap();
    close(g.value(out.alpha), &softmax(&[sig(1.0), sig(-1.0)]), TOL);
}

#[test]
fn conv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::new();
    let conv = ConvParams::register(&mut params, "conv", 2, 3, 2, &mut rng);
    scramble(&mut params, &mut rng);
    let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut g = Graph::new(&params);
    let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
    let m = conv_wgram(&mut g, &vars, &conv).unwrap();
    let want = conv_oracle(&params, &conv, &xs);
    close(g.value(m), &want.concat(), TOL);
    let pooled = max_pool(&mut g, m).unwrap();
    close(g.value(pooled), &column_max(&want), TOL);
}

#[test]
fn conv_rejects_short_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamSet::new();
    let conv = ConvParams::register(&mut params, "conv", 2, 3, 3, &mut rng);
    let mut g = Graph::new(&params);
    let vars = [g.input(vec![0.0, 1.0]), g.input(vec![1.0, 0.0])];
    assert!(conv_wgram(&mut g, &vars, &conv).is_err());
}

#[test]
fn cross_entropy_closed_form() {
    let params = ParamSet::new();
    let mut g = Graph::new(&params);
    let logits = g.input(vec![1.0, 2.0, 3.0]);
    let (p, loss) = softmax_xent(&mut g, logits, 0).unwrap();
    let e = std::f64::consts::E;
    let want = (e + e * e + e * e * e).ln() - 1.0;
    assert!((g.scalar(loss) - want).abs() < TOL);
    close(&p, &softmax(&[1.0, 2.0, 3.0]), TOL);
    assert!(softmax_xent(&mut g, logits, 3).is_err());
}

fn karnn(rng: &mut ChaCha8Rng, lambda: f64) -> (Karnn, EmbeddingTable) {
    let mut c = KarnnConfig::new(3, 2);
    c.hidden_dim = 4;
    c.attention_dim = 3;
    c.lambda = lambda;
    let mut m = Karnn::new(c).unwrap();
    scramble(&mut m.params, rng);
    (m, random_table(rng, 8, 3))
}

fn karnn_oracle(m: &Karnn, table: &EmbeddingTable, tokens: &[TokenId]) -> (Vec<f64>, Vec<f64>) {
    let mut h = vec![0.0; m.config.hidden_dim];
    let mut hs = Vec::new();
    for x in rows(table, tokens) {
        h = gru_oracle(&m.params, &m.gru, &x, &h);
        hs.push(h.clone());
    }
    let (alpha, v) = attention_oracle(&m.params, &m.attention, &hs);
    (softmax(&affine(&m.params, &m.output, &v)), alpha)
}

#[test]
fn karnn_forward_composes_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, table) = karnn(&mut rng, 0.1);
    let tokens = [3, 5, 2];
    let out = karnn_forward(&tokens, &table, &m).unwrap();
    let (p, alpha) = karnn_oracle(&m, &table, &tokens);
    close(&out.probs, &p, TOL);
    close(&out.alpha, &alpha, TOL);
}

#[test]
fn karnn_batch_loss_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, table) = karnn(&mut rng, 0.3);
    let docs: [(&[TokenId], usize, &[bool]); 2] = [
        (&[2, 3, 4, 5], 1, &[false, true, false, true]),
        (&[7, 6, 2], 0, &[true, false, false]),
    ];
    let mut want = 0.0;
    let batch: Vec<Example> = docs
        .iter()
        .map(|&(tokens, label, mask)| {
            let (p, alpha) = karnn_oracle(&m, &table, tokens);
            let mass: f64 = alpha.iter().zip(mask).filter(|(_, &on)| on).map(|(a, _)| a).sum();
            want += -p[label].ln() - 0.3 * mass;
            Example {
                tokens: tokens.to_vec(),
                label,
                mask: KeywordMask(mask.to_vec()),
                slots: KeywordSlots(vec![]),
            }
        })
        .collect();
    let got = karnn_loss(&batch, &table, &m).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

fn hdnn(rng: &mut ChaCha8Rng, variant: HdnnVariant) -> (Hdnn, EmbeddingTable) {
    let mut c = HdnnConfig::new(variant, 4, 3);
    c.hidden_dim = 5;
    c.conv_channels = 6;
    c.slots = 3;
    let mut m = Hdnn::new(c).unwrap();
    scramble(&mut m.params, rng);
    (m, random_table(rng, 10, 4))
}

fn hdnn_oracle(m: &Hdnn, table: &EmbeddingTable, tokens: &[TokenId], slots: &[TokenId]) -> Vec<f64> {
    let p = &m.params;
    let xs = rows(table, tokens);
    let h_c = match &m.text {
        TextBranch::Conv(c) => column_max(&conv_oracle(p, c, &xs)),
        TextBranch::Gru(g) => xs.iter().fold(vec![0.0; m.config.hidden_dim], |h, x| gru_oracle(p, g, x, &h)),
    };
    let hidden: Vec<Vec<f64>> = rows(table, slots)
        .iter()
        .map(|k| affine(p, &m.fcn, k).iter().map(|v| v.max(0.0)).collect())
        .collect();
    let h_f = column_max(&hidden);
    let fused = [affine(p, &m.fuse_text, &h_c), affine(p, &m.fuse_keywords, &h_f)].concat();
    softmax(&affine(p, &m.output, &fused))
}

#[test]
fn hdnn_forward_composes_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for variant in [HdnnVariant::Cnn, HdnnVariant::Rnn] {
        let (m, table) = hdnn(&mut rng, variant);
        let tokens = [2, 9, 4, 4, 7, 3];
        let slots = KeywordSlots(vec![9, 4, PAD]);
        let got = hdnn_forward(&tokens, &slots, &table, &m).unwrap();
        close(&got, &hdnn_oracle(&m, &table, &tokens, &slots.0), TOL);
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn hdnn_batch_loss_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, table) = hdnn(&mut rng, HdnnVariant::Cnn);
    let docs: [(&[TokenId], usize, [TokenId; 3]); 2] = [(&[2, 3, 4, 5], 2, [3, PAD, PAD]), (&[8, 6, 2], 0, [PAD; 3])];
    let mut want = 0.0;
    let batch: Vec<Example> = docs
        .iter()
        .map(|&(tokens, label, slots)| {
            want -= hdnn_oracle(&m, &table, tokens, &slots)[label].ln();
            Example {
                tokens: tokens.to_vec(),
                label,
                mask: KeywordMask(vec![false; tokens.len()]),
                slots: KeywordSlots(slots.to_vec()),
            }
        })
        .collect();
    let got = hdnn_loss(&batch, &table, &m).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}
