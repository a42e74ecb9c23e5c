use fpo_lab::autodiff::{grad_check, Array, Graph};
use fpo_lab::model::{read_checkpoint, write_checkpoint, LmConfig, Tap, TinyLM};
use proptest::prelude::*;

fn cfg() -> LmConfig {
    LmConfig {
        vocab: 12,
        d_model: 8,
        layers: 2,
        heads: 2,
        context: 16,
        d_ff: 12,
    }
}

fn p<'a>(m: &'a TinyLM<f64>, name: &str) -> &'a Array<f64> {
    m.params().get(m.params().by_name(name).expect(name))
}

fn matvec(x: &[f64], w: &Array<f64>) -> Vec<f64> {
    (0..w.cols()).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.at(i, j)).sum()).collect()
}

fn rms(x: &[f64], gain: &Array<f64>) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = (ms + 1e-5).sqrt();
    x.iter().zip(gain.data()).map(|(v, g)| v / s * g).collect()
}

/// Loop-level forward pass, independent of the graph engine.
/// Returns per-position logits and the residual stream after every block.
fn naive_forward(m: &TinyLM<f64>, tokens: &[u32]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = *m.config();
    let (d, nh) = (c.d_model, c.heads);
    let dh = d / nh;
    let n = tokens.len();
    let (tok, pos) = (p(m, "tok_emb"), p(m, "pos_emb"));
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| (0..d).map(|j| tok.at(tokens[t] as usize, j) + pos.at(t, j)).collect())
        .collect();
    let mut resid = Vec::new();
    for l in 0..c.layers {
        let pre = format!("layers.{l}.");
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|r| matvec(&rms(r, p(m, &(pre.clone() + "attn_norm"))), p(m, &(pre.clone() + "w_qkv"))))
            .collect();
        let mut cat = vec![vec![0.0; d]; n];
        for h in 0..nh {
            for i in 0..n {
                let q = &qkv[i][h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + h * dh..d + (h + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for (j, wj) in w.iter().enumerate() {
                    for e in 0..dh {
                        cat[i][h * dh + e] += wj / z * qkv[j][2 * d + h * dh + e];
                    }
                }
            }
        }
        for i in 0..n {
            let o = matvec(&cat[i], p(m, &(pre.clone() + "w_o")));
            for j in 0..d {
                x[i][j] += o[j];
            }
            let h = rms(&x[i], p(m, &(pre.clone() + "mlp_norm")));
            let act: Vec<f64> = matvec(&h, p(m, &(pre.clone() + "w_fc"))).into_iter().map(|v| v.max(0.0)).collect();
            let mlp = matvec(&act, p(m, &(pre.clone() + "w_proj")));
            for j in 0..d {
                x[i][j] += mlp[j];
            }
        }
        resid.push(x.clone());
    }
    let logits = x.iter().map(|r| matvec(&rms(r, p(m, "final_norm")), p(m, "w_out"))).collect();
    (logits, resid)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

#[test]
fn graph_forward_matches_loop_oracle() {
    let m = TinyLM::<f64>::init(cfg(), 11).unwrap();
    let tokens = [0u32, 5, 7, 3, 1, 9, 9, 4, 2];
    let trace = m.forward(&tokens, &[Tap::residual(0), Tap::residual(1)]).unwrap();
    let (logits, resid) = naive_forward(&m, &tokens);
    for (t, row) in logits.iter().enumerate() {
        for (v, want) in row.iter().enumerate() {
            assert!((trace.logits.at(t, v) - want).abs() < 1e-10, "logit {t},{v}");
        }
    }
    for (l, (_, got)) in trace.taps.iter().enumerate() {
        for t in 0..tokens.len() {
            for j in 0..cfg().d_model {
                assert!((got.at(t, j) - resid[l][t][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn response_logprobs_match_oracle() {
    let m = TinyLM::<f64>::init(cfg(), 12).unwrap();
    let (x, y) = ([5u32, 6, 1], [7u32, 8, 2]);
    let lp = m.per_token_logprobs(&x, &y).unwrap();
    let tokens = [0u32, 5, 6, 1, 7, 8];
    let (logits, _) = naive_forward(&m, &tokens);
    for (i, &yt) in y.iter().enumerate() {
        let want = log_softmax(&logits[x.len() + i])[yt as usize];
        assert!((lp[i] - want).abs() < 1e-10);
    }
    let total: f64 = lp.iter().sum();
    assert!((m.seq_logprob(&x, &y, false).unwrap() - total).abs() < 1e-12);
    assert!((m.seq_logprob(&x, &y, true).unwrap() - total / 3.0).abs() < 1e-12);
}

#[test]
fn logprob_gradient_passes_finite_differences() {
    let m = TinyLM::<f64>::init(cfg(), 13).unwrap();
    let report = grad_check(m.params(), 1e-5, |params| {
        let model = TinyLM::from_params(cfg(), params.clone())?;
        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let r = model.build_response(&mut g, &leaves, &[4, 5, 1], &[6, 3, 2], &[])?;
        let v = g.forward(params, &[])?;
        let grads = g.backward(&v, r.logprob_sum, params)?;
        Ok((v.scalar(r.logprob_sum), grads))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = TinyLM::<f32>::init(cfg(), 14).unwrap();
    let bytes = write_checkpoint(&m);
    let back: TinyLM<f32> = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f32>(&bad).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(read_checkpoint::<f32>(&long).is_err());
    assert!(read_checkpoint::<f32>(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn out_of_vocab_and_overlong_inputs_are_rejected() {
    let m = TinyLM::<f64>::init(cfg(), 15).unwrap();
    assert!(m.forward(&[0, 12], &[]).is_err());
    assert!(m.forward(&vec![3; 17], &[]).is_err());
    assert!(m.forward(&[0, 3], &[Tap::residual(2)]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_prefix_invariance(
        seed in 0u64..1000,
        prefix in prop::collection::vec(3u32..12, 1..6),
        tail in prop::collection::vec(3u32..12, 1..6),
    ) {
        let m = TinyLM::<f64>::init(cfg(), seed).unwrap();
        let short = m.forward(&prefix, &[]).unwrap().logits;
        let mut long_tokens = prefix.clone();
        long_tokens.extend(&tail);
        let long = m.forward(&long_tokens, &[]).unwrap().logits;
        for t in 0..prefix.len() {
            for v in 0..cfg().vocab {
                prop_assert!((short.at(t, v) - long.at(t, v)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn token_logprobs_are_nonpositive(seed in 0u64..1000, y in prop::collection::vec(3u32..12, 1..8)) {
        let m = TinyLM::<f64>::init(cfg(), seed).unwrap();
        for lp in m.per_token_logprobs(&[4, 1], &y).unwrap() {
            prop_assert!(lp <= 0.0);
        }
    }
}
