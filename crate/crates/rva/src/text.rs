//! Language features: vocabulary, shared word embeddings, bi-LSTM
//! sentence encoders (separate parameters for the question and history
//! pathways), and the two purpose-specific self-attention heads that
//! produce the reference-aware and answering-aware question features.

use std::collections::HashMap;
use std::path::Path;

use crate::nn::{self, FwdCtx};
use crate::tensor::{Binder, Graph, NodeId, ParamSet, Result, Rng, Tensor, TensorError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

pub const MAX_CAPTION_LEN: usize = 40;
pub const MAX_QUESTION_LEN: usize = 20;
pub const MAX_ANSWER_LEN: usize = 20;

/// Token-to-index map with reserved pad and unk slots.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(words: I) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index = HashMap::new();
        index.insert(tokens[0].clone(), PAD);
        index.insert(tokens[1].clone(), UNK);
        let mut sorted: Vec<&str> = words.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        for w in sorted {
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Vocabulary { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All tokens beyond the two fixed specials, in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, words: &[String], limit: usize) -> Vec<usize> {
        words.iter().take(limit).map(|w| self.id(w)).collect()
    }
}

/// Which bi-LSTM parameter set to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderId {
    Question,
    History,
}

impl EncoderId {
    fn prefix(self) -> &'static str {
        match self {
            EncoderId::Question => "enc_q",
            EncoderId::History => "enc_h",
        }
    }
}

/// Which self-attention head to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Ref,
    Ans,
}

impl Purpose {
    fn prefix(self) -> &'static str {
        match self {
            Purpose::Ref => "selfatt.ref",
            Purpose::Ans => "selfatt.ans",
        }
    }
}

/// Output of one bi-LSTM pass over a sentence.
pub struct SeqEncoding {
    /// Word embeddings of the non-pad tokens, [m, d_emb].
    pub words: NodeId,
    /// Per-word hidden states [fwd_i, bwd_i], each 2*d_h.
    pub hidden: Vec<NodeId>,
    /// Sentence code [fwd_last, bwd_first], 2*d_h.
    pub code: NodeId,
}

/// Per-round question bundle.
pub struct QuestionEncoding {
    pub seq: SeqEncoding,
    pub q_ref: NodeId,
    pub q_ans: NodeId,
    pub alpha_ref: NodeId,
    pub alpha_ans: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct TextDims {
    pub vocab: usize,
    pub d_emb: usize,
    pub d_h: usize,
}

pub struct TextEncoder {
    pub dims: TextDims,
    /// When set, q* sums hidden states instead of word embeddings.
    pub attend_hidden: bool,
}

impl TextEncoder {
    pub fn new(dims: TextDims) -> Self {
        TextEncoder {
            dims,
            attend_hidden: false,
        }
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut Rng) {
        let TextDims { vocab, d_emb, d_h } = self.dims;
        let emb_scale = (1.0 / d_emb as f64).sqrt();
        params.init_uniform("embed.table", vec![vocab, d_emb], emb_scale, rng);
        // pad row frozen at zero
        for x in params.get_mut("embed.table").unwrap().data[..d_emb].iter_mut() {
            *x = 0.0;
        }
        for enc in ["enc_q", "enc_h"] {
            for dir in ["f", "b"] {
                let scale = (1.0 / (d_emb + d_h) as f64).sqrt();
                params.init_uniform(&format!("{enc}.{dir}.wx"), vec![4 * d_h, d_emb], scale, rng);
                params.init_uniform(&format!("{enc}.{dir}.wh"), vec![4 * d_h, d_h], scale, rng);
                params.init_zeros(&format!("{enc}.{dir}.b"), vec![4 * d_h]);
            }
        }
        for p in [Purpose::Ref, Purpose::Ans] {
            nn::init_gated(params, p.prefix(), 2 * d_h, d_h, rng);
            nn::init_score(params, &format!("{}.w", p.prefix()), d_h, rng);
        }
    }

    fn lstm_step(
        &self,
        g: &mut Graph,
        wx: NodeId,
        wh: NodeId,
        bias: NodeId,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let d_h = self.dims.d_h;
        let gx = g.matvec(wx, x)?;
        let gh = g.matvec(wh, h)?;
        let s = g.add(gx, gh)?;
        let gates = g.add(s, bias)?;
        let i = g.slice(gates, 0, d_h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice(gates, d_h, d_h)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice(gates, 2 * d_h, d_h)?;
        let cand = g.tanh(cand)?;
        let o = g.slice(gates, 3 * d_h, d_h)?;
        let o = g.sigmoid(o)?;
        let fc = g.hadamard(f, c)?;
        let ic = g.hadamard(i, cand)?;
        let c_new = g.add(fc, ic)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.hadamard(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Runs the bi-LSTM over a tail-padded token sequence. Pads are
    /// dropped before the recurrence, so they cannot influence any
    /// state and padding invariance holds exactly.
    pub fn encode_sequence(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        params: &ParamSet,
        tokens: &[usize],
        enc: EncoderId,
    ) -> Result<SeqEncoding> {
        let real_len = tokens
            .iter()
            .position(|&t| t == PAD)
            .unwrap_or(tokens.len());
        if real_len == 0 {
            return Err(TensorError::Invalid {
                op: "encode_sequence",
                reason: "empty (or all-pad) sequence".into(),
            });
        }
        if tokens[real_len..].iter().any(|&t| t != PAD) {
            return Err(TensorError::Invalid {
                op: "encode_sequence",
                reason: "pads are only allowed at the tail".into(),
            });
        }
        let tokens = &tokens[..real_len];
        let d_h = self.dims.d_h;
        let table = b.get(g, params, "embed.table")?;
        let words = g.embedding_rows(table, tokens)?;
        let xs: Vec<NodeId> = (0..real_len)
            .map(|i| g.row(words, i))
            .collect::<Result<_>>()?;

        let prefix = enc.prefix();
        let run_dir = |g: &mut Graph, b: &mut Binder, dir: &str, order: Vec<usize>| -> Result<Vec<NodeId>> {
            let wx = b.get(g, params, &format!("{prefix}.{dir}.wx"))?;
            let wh = b.get(g, params, &format!("{prefix}.{dir}.wh"))?;
            let bias = b.get(g, params, &format!("{prefix}.{dir}.b"))?;
            let mut h = g.constant(Tensor::zeros(vec![d_h]))?;
            let mut c = g.constant(Tensor::zeros(vec![d_h]))?;
            let mut out = vec![NodeId(0); order.len()];
            for &i in &order {
                let (nh, nc) = self.lstm_step(g, wx, wh, bias, xs[i], h, c)?;
                h = nh;
                c = nc;
                out[i] = h;
            }
            Ok(out)
        };
        let fwd = run_dir(g, b, "f", (0..real_len).collect())?;
        let bwd = run_dir(g, b, "b", (0..real_len).rev().collect())?;

        let hidden: Vec<NodeId> = (0..real_len)
            .map(|i| g.concat(&[fwd[i], bwd[i]]))
            .collect::<Result<_>>()?;
        let code = g.concat(&[fwd[real_len - 1], bwd[0]])?;
        Ok(SeqEncoding { words, hidden, code })
    }

    /// Self-attention over word positions:
    /// z_i = l2norm(f(h_i)), alpha = softmax(W Z), q* = sum alpha_i w_i.
    pub fn self_attend(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        params: &ParamSet,
        ctx: &mut FwdCtx,
        seq: &SeqEncoding,
        purpose: Purpose,
    ) -> Result<(NodeId, NodeId)> {
        let prefix = purpose.prefix();
        let mut zs = Vec::with_capacity(seq.hidden.len());
        for &h in &seq.hidden {
            let z = nn::gated(g, b, params, ctx, prefix, h)?;
            zs.push(g.l2_normalize(z)?);
        }
        let rows = g.stack_rows(&zs)?;
        let scores = nn::score_rows(g, b, params, &format!("{prefix}.w"), rows)?;
        let alpha = g.softmax(scores)?;
        let target = if self.attend_hidden {
            g.stack_rows(&seq.hidden)?
        } else {
            seq.words
        };
        let q_star = g.vecmat(alpha, target)?;
        Ok((q_star, alpha))
    }

    /// Full question-pathway encoding for one sentence.
    pub fn encode_question(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        params: &ParamSet,
        ctx: &mut FwdCtx,
        tokens: &[usize],
    ) -> Result<QuestionEncoding> {
        let seq = self.encode_sequence(g, b, params, tokens, EncoderId::Question)?;
        let (q_ref, alpha_ref) = self.self_attend(g, b, params, ctx, &seq, Purpose::Ref)?;
        let (q_ans, alpha_ans) = self.self_attend(g, b, params, ctx, &seq, Purpose::Ans)?;
        Ok(QuestionEncoding {
            seq,
            q_ref,
            q_ans,
            alpha_ref,
            alpha_ans,
        })
    }

    /// History code e^h for one round: the caption alone at round 0,
    /// otherwise the question tokens followed by the answer tokens.
    pub fn encode_history_round(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        params: &ParamSet,
        question_tokens: &[usize],
        answer_tokens: Option<&[usize]>,
        is_caption: bool,
    ) -> Result<NodeId> {
        let joined: Vec<usize> = if is_caption {
            question_tokens
                .iter()
                .cloned()
                .take(MAX_CAPTION_LEN)
                .collect()
        } else {
            let answer = answer_tokens.ok_or_else(|| TensorError::Invalid {
                op: "encode_history_round",
                reason: "missing answer for a non-caption round".into(),
            })?;
            let strip = |ts: &[usize], lim: usize| -> Vec<usize> {
                ts.iter().cloned().filter(|&t| t != PAD).take(lim).collect()
            };
            let mut v = strip(question_tokens, MAX_QUESTION_LEN);
            v.extend(strip(answer, MAX_ANSWER_LEN));
            v
        };
        Ok(self
            .encode_sequence(g, b, params, &joined, EncoderId::History)?
            .code)
    }
}

/// Loads plain-text embeddings: each line is "token v1 ... v_d". Tokens
/// missing from the file keep their random initialization; the pad row
/// stays zero.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    params: &mut ParamSet,
    d_emb: usize,
) -> std::result::Result<usize, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table = params
        .get_mut("embed.table")
        .map_err(|e| e.to_string())?;
    let mut loaded = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let token = it.next().ok_or_else(|| format!("line {}: empty", lineno + 1))?;
        let values: Vec<f64> = it
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| format!("line {}: bad value {s:?}: {e}", lineno + 1))
            })
            .collect::<std::result::Result<_, _>>()?;
        if values.len() != d_emb {
            return Err(format!(
                "line {}: expected {} values, got {}",
                lineno + 1,
                d_emb,
                values.len()
            ));
        }
        let id = vocab.id(token);
        if id != UNK && id != PAD {
            table.data[id * d_emb..(id + 1) * d_emb].copy_from_slice(&values);
            loaded += 1;
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DecisionMode;
    use crate::tensor::Precision;

    const D_EMB: usize = 4;
    const D_H: usize = 3;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["red", "lamp", "is", "the", "on", "blue", "cat"])
    }

    fn encoder(v: &Vocabulary) -> (TextEncoder, ParamSet) {
        let enc = TextEncoder::new(TextDims {
            vocab: v.len(),
            d_emb: D_EMB,
            d_h: D_H,
        });
        let mut params = ParamSet::new();
        enc.init_params(&mut params, &mut Rng::new(31));
        (enc, params)
    }

    fn code_of(enc: &TextEncoder, params: &ParamSet, tokens: &[usize], id: EncoderId) -> Vec<f64> {
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let seq = enc.encode_sequence(&mut g, &mut b, params, tokens, id).unwrap();
        g.value(seq.code).data.clone()
    }

    #[test]
    fn vocabulary_is_sorted_deduplicated_and_total() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.token(v.id("lamp")), "lamp");
        // insertion order must not matter
        let v2 = Vocabulary::build(["cat", "blue", "on", "the", "is", "lamp", "red", "red"]);
        assert_eq!(v.len(), v2.len());
        for t in ["red", "lamp", "cat"] {
            assert_eq!(v.id(t), v2.id(t));
        }
    }

    #[test]
    fn tail_padding_never_changes_the_code() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let words: Vec<String> = ["the", "red", "lamp"].map(String::from).to_vec();
        let bare = v.encode(&words, MAX_QUESTION_LEN);
        let mut padded = bare.clone();
        padded.extend([PAD; 5]);
        for id in [EncoderId::Question, EncoderId::History] {
            let a = code_of(&enc, &params, &bare, id);
            let b = code_of(&enc, &params, &padded, id);
            assert_eq!(a, b, "tail pads altered the {id:?} code");
        }
    }

    #[test]
    fn interior_pads_and_empty_sequences_are_rejected() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mid_pad = [v.id("the"), PAD, v.id("lamp")];
        assert!(enc
            .encode_sequence(&mut g, &mut b, &params, &mid_pad, EncoderId::Question)
            .is_err());
        assert!(enc
            .encode_sequence(&mut g, &mut b, &params, &[], EncoderId::Question)
            .is_err());
        assert!(enc
            .encode_sequence(&mut g, &mut b, &params, &[PAD, PAD], EncoderId::Question)
            .is_err());
    }

    #[test]
    fn question_and_history_pathways_use_separate_parameters() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let tokens = v.encode(
            &["the", "blue", "cat"].map(String::from),
            MAX_QUESTION_LEN,
        );
        let q = code_of(&enc, &params, &tokens, EncoderId::Question);
        let h = code_of(&enc, &params, &tokens, EncoderId::History);
        assert_ne!(q, h);
    }

    #[test]
    fn word_order_changes_the_code() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let fwd = v.encode(&["red", "lamp", "on"].map(String::from), 20);
        let rev: Vec<usize> = fwd.iter().rev().cloned().collect();
        assert_ne!(
            code_of(&enc, &params, &fwd, EncoderId::Question),
            code_of(&enc, &params, &rev, EncoderId::Question)
        );
    }

    fn greedy_ctx<'a>(drop: &'a mut Rng, gum: &'a mut Rng) -> FwdCtx<'a> {
        FwdCtx {
            train: false,
            dropout: 0.0,
            mode: DecisionMode::Greedy,
            tau: 1.0,
            drop_rng: drop,
            gumbel_rng: gum,
        }
    }

    #[test]
    fn single_word_attention_returns_that_words_embedding() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(0);
        let mut gum = Rng::new(0);
        let mut ctx = greedy_ctx(&mut drop, &mut gum);
        let tokens = [v.id("lamp")];
        let q = enc
            .encode_question(&mut g, &mut b, &params, &mut ctx, &tokens)
            .unwrap();
        assert_eq!(g.value(q.alpha_ref).data, vec![1.0]);
        let emb = &params.get("embed.table").unwrap().data
            [v.id("lamp") * D_EMB..(v.id("lamp") + 1) * D_EMB];
        let q_ref = g.value(q.q_ref).data.clone();
        for (a, b) in q_ref.iter().zip(emb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_and_answer_heads_attend_differently() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let mut drop = Rng::new(0);
        let mut gum = Rng::new(0);
        let mut ctx = greedy_ctx(&mut drop, &mut gum);
        let tokens = v.encode(&["is", "the", "lamp", "on"].map(String::from), 20);
        let q = enc
            .encode_question(&mut g, &mut b, &params, &mut ctx, &tokens)
            .unwrap();
        assert_ne!(g.value(q.alpha_ref).data, g.value(q.alpha_ans).data);
        for alpha in [q.alpha_ref, q.alpha_ans] {
            let a = g.value(alpha).data.clone();
            assert_eq!(a.len(), tokens.len());
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn history_round_joins_question_and_answer() {
        let v = vocab();
        let (enc, params) = encoder(&v);
        let q_tokens = v.encode(&["is", "the", "lamp", "on"].map(String::from), 20);
        let a_tokens = v.encode(&["on"].map(String::from), 20);
        let mut g = Graph::new(Precision::F64);
        let mut b = Binder::new();
        let qa = enc
            .encode_history_round(&mut g, &mut b, &params, &q_tokens, Some(&a_tokens), false)
            .unwrap();
        let joined: Vec<usize> = q_tokens.iter().chain(&a_tokens).cloned().collect();
        let direct = enc
            .encode_sequence(&mut g, &mut b, &params, &joined, EncoderId::History)
            .unwrap();
        assert_eq!(g.value(qa).data, g.value(direct.code).data);
        // a non-caption round without an answer is malformed
        assert!(enc
            .encode_history_round(&mut g, &mut b, &params, &q_tokens, None, false)
            .is_err());
    }

    #[test]
    fn embedding_file_loads_and_reports_bad_lines() {
        let v = vocab();
        let (_, mut params) = encoder(&v);
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("emb.txt");
        std::fs::write(&good, "lamp 1 2 3 4\nzebra 9 9 9 9\n\ncat 5 6 7 8\n").unwrap();
        let n = load_embeddings(&good, &v, &mut params, D_EMB).unwrap();
        assert_eq!(n, 2, "unknown words must not load");
        let table = params.get("embed.table").unwrap();
        let lamp = &table.data[v.id("lamp") * D_EMB..(v.id("lamp") + 1) * D_EMB];
        assert_eq!(lamp, [1.0, 2.0, 3.0, 4.0]);
        assert!(table.data[..D_EMB].iter().all(|&x| x == 0.0), "pad row must stay zero");

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "lamp 1 2 3 4\ncat 1 2\n").unwrap();
        let err = load_embeddings(&bad, &v, &mut params, D_EMB).unwrap_err();
        assert!(err.contains("line 2"), "error should cite the line: {err}");
    }

    #[test]
    fn pad_row_initializes_to_zero() {
        let v = vocab();
        let (_, params) = encoder(&v);
        let table = params.get("embed.table").unwrap();
        assert!(table.data[..D_EMB].iter().all(|&x| x == 0.0));
        assert!(table.data[D_EMB..].iter().any(|&x| x != 0.0));
    }
}
