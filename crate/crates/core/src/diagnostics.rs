//! Whole-model gradient integrity check: finite differences over every
//! parameter tensor of both stages on a small fixed instance.

use crate::autodiff::{check_gradients, GradCheckReport, Tape, FD_STEP};
use crate::checkpoint::{derive_rng, TrainState};
use crate::config::ModelConfig;
use crate::data::{Example, Vocab};
use crate::error::Result;
use crate::extraction::{candidate_set_log_prob, example_span_tables, mle_extract_loss, Span};
use crate::selection::mle_select_loss;

/// The fixed probe: two passages of eight tokens, two candidates per passage.
fn probe_instance(seed: u64) -> (Vocab, TrainState, Example, Vec<Span>) {
    let tokens: Vec<String> = (0..18).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::build(std::iter::once(tokens.as_slice()), 1);
    let cfg = ModelConfig {
        vocab: vocab.len(), // 20 with the reserved ids
        d_word: 5,
        d_hidden: 4,
        d_cand: 5,
        d_common: 3,
        d_dist: 6,
        dist_clip: 10,
    };
    let state = TrainState::new(cfg, Default::default(), seed);
    let example = Example {
        id: "probe".into(),
        question: vec!["t0".into(), "t1".into(), "t2".into()],
        answers: vec!["t3 t4".into()],
        passages: vec![
            vec![
                "t3".into(), "t4".into(), "t5".into(), "t6".into(),
                "t7".into(), "t8".into(), "t9".into(), "t10".into(),
            ],
            vec![
                "t11".into(), "t3".into(), "t4".into(), "t12".into(),
                "t13".into(), "t14".into(), "t15".into(), "t16".into(),
            ],
        ],
    };
    // K=2 candidates from each passage; the gold span is among them
    let spans = vec![
        Span { passage: 0, begin: 0, end: 1 },
        Span { passage: 0, begin: 4, end: 5 },
        Span { passage: 1, begin: 1, end: 2 },
        Span { passage: 1, begin: 5, end: 6 },
    ];
    (vocab, state, example, spans)
}

/// Run the full finite-difference suite: a combined loss touching the
/// extraction likelihood, the candidate-set log-probability, and the
/// selection likelihood, differentiated against every tensor of both models.
pub fn model_grad_check(seed: u64) -> Result<GradCheckReport> {
    let (vocab, state, example, spans) = probe_instance(seed);
    let l_max = 4;
    let chosen: Vec<Vec<usize>> = vec![vec![0, 9], vec![2, 11]];
    // perturb parameters slightly so no two scores tie
    {
        let mut rng = derive_rng(seed, "probe-jitter", 0, 0);
        for (_, p) in state.named_params() {
            let mut t = p.borrow_mut();
            for v in t.data_mut() {
                *v += 0.01 * (rand::Rng::random::<f64>(&mut rng) - 0.5);
            }
        }
    }

    let forward = |with_backward: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let xvars = state.extraction.bind(&mut tape);
        let svars = state.selection.bind(&mut tape);
        let mut none = None;
        let extract = mle_extract_loss(&mut tape, &xvars, &vocab, &example, l_max, &mut none)?
            .expect("gold present in probe");
        let select = mle_select_loss(
            &mut tape, &svars, &vocab, &example, &spans, state.flags, &mut none,
        )?
        .expect("gold candidate present in probe");
        let tables = example_span_tables(&mut tape, &xvars, &vocab, &example, l_max, &mut none)?;
        let set_lp = candidate_set_log_prob(&mut tape, &tables, &chosen)?;
        let set_term = tape.scale(set_lp, -0.5);
        let partial = tape.add(extract, select)?;
        let loss = tape.add(partial, set_term)?;
        if with_backward {
            tape.backward(loss)?;
        }
        Ok(tape.scalar_value(loss))
    };

    state.zero_grads();
    forward(true)?;
    check_gradients(&state.named_params(), || forward(false), FD_STEP)
}
