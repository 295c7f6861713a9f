use ndarray::{Array2, Axis};
use serde::Serialize;

use super::ema::TeacherState;
use super::losses::{loss_contrastive, loss_masked, loss_utterance, LossReport};
use super::masks::make_masks;
use super::model::Model;
use super::targets::teacher_targets;
use crate::autodiff::optim::{cosine_lr, AdamW};
use crate::autodiff::{Binder, Graph, Leaf, ParamSet};
use crate::error::{ensure, Result};
use crate::rng::{keyed, Lane};

#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: TeacherState,
    pub opt: AdamW,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let student = model.init_student(&mut keyed(seed, 0, Lane::Init, 0));
        let s = &model.ssl;
        let teacher = TeacherState::new(
            model.teacher_from(&student),
            s.steps,
            s.ema_start,
            s.ema_end,
        );
        let opt = AdamW::new(&student, s.beta1, s.beta2, s.weight_decay);
        TrainState {
            student,
            teacher,
            opt,
            step: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepOutput {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
    pub xi: f64,
    /// Largest gradient magnitude that reached any teacher parameter.
    pub teacher_grad_max: f64,
    /// Teacher parameters that received any gradient node at all.
    pub teacher_grads_present: usize,
}

/// One optimisation step on `batch` (each `F x T`): teacher targets from the
/// full inputs, student views on visible tokens, AdamW, then EMA.
pub fn pretrain_step(
    model: &Model,
    state: &mut TrainState,
    batch: &[Array2<f64>],
) -> Result<StepOutput> {
    ensure!(!batch.is_empty(), Invalid, "empty batch");
    let cfg = &model.ssl;
    let (fp, t0) = (model.aape.freq_patches(), batch[0].ncols());
    ensure!(
        batch.iter().all(|x| x.ncols() == t0),
        Shape,
        "batch items differ in length"
    );
    ensure!(
        t0 % model.aape.p_time == 0,
        Shape,
        "T={t0} not divisible by P_time"
    );
    let tp = t0 / model.aape.p_time;
    let step = state.step;

    let mut g = Graph::new();
    let (student_grads, report, teacher_vars, all_grads) = {
        let mut sb = Binder::new(&state.student, Leaf::Param);
        let mut tb = Binder::new(&state.teacher.params, Leaf::Param);
        let (mut preds, mut tgts, mut clss, mut utts, mut zs, mut ids) =
            (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (i, x) in batch.iter().enumerate() {
            let teach = model.encode(&mut g, &mut tb, x, None, false)?;
            let layers: Vec<Array2<f64>> = teach
                .layers
                .iter()
                .map(|&l| {
                    let d = g.detach(l);
                    g.value(d).clone()
                })
                .collect();
            let (pooled, utt) = teacher_targets(&layers)?;
            let utt = g.constant(utt.insert_axis(Axis(0)));
            let key = (i * cfg.masks.views) as u64;
            let views = make_masks(fp, tp, &cfg.masks, |v| {
                keyed(state.seed, step as u64, Lane::Mask, key + v as u64)
            })?;
            for view in &views.views {
                let enc = model.encode(&mut g, &mut sb, x, Some(&view.visible), true)?;
                let pred = model.predict(&mut g, &mut sb, enc.tokens, &view.queries, tp)?;
                preds.push(pred);
                tgts.push(g.constant(pooled.select(Axis(0), &view.queries)));
                clss.push(enc.cls.expect("student uses a class token"));
                utts.push(utt);
                zs.push(model.view_embedding(&mut g, &mut sb, enc.tokens)?);
                ids.push(i);
            }
        }
        let lm = loss_masked(&mut g, &preds, &tgts)?;
        let lu = loss_utterance(&mut g, &clss, &utts)?;
        let z = g.concat_rows(&zs);
        let lc = loss_contrastive(&mut g, z, &ids, cfg.tau)?;
        let mu = g.add(lm, lu);
        let wc = g.scale(lc, cfg.eta);
        let total = g.add(mu, wc);
        let report =
            LossReport::compose(g.scalar(lm), g.scalar(lu), g.scalar(lc), cfg.eta, cfg.tau);
        debug_assert_eq!(report.l_total.to_bits(), g.scalar(total).to_bits());
        let grads = g.backward(total);
        let student_grads = sb.collect(&grads);
        (student_grads, report, tb.bound(), grads)
    };

    let mut teacher_grad_max = 0.0f64;
    let mut teacher_grads_present = 0;
    for v in teacher_vars.into_iter().flatten() {
        if let Some(gr) = all_grads.get(v) {
            teacher_grads_present += 1;
            teacher_grad_max = gr.iter().fold(teacher_grad_max, |m, &x| m.max(x.abs()));
        }
    }

    let lr = cosine_lr(step, cfg.steps, cfg.warmup, cfg.lr, cfg.lr_floor);
    state.opt.step(&mut state.student, &student_grads, lr)?;
    let xi = state.teacher.update(&state.student)?;
    state.step += 1;
    Ok(StepOutput {
        step,
        report,
        lr,
        xi,
        teacher_grad_max,
        teacher_grads_present,
    })
}

/// `ssl.steps` steps on one fixed synthetic batch keyed by `data_seed`.
pub fn pretrain_fixed(
    aape: &crate::aape::AapeConfig,
    ssl: &super::SslConfig,
    seed: u64,
    data_seed: u64,
    mut on_step: impl FnMut(&StepOutput),
) -> Result<(Model, TrainState, Vec<StepOutput>)> {
    let model = Model::new(aape, ssl)?;
    let batch = super::synth::synth_batch(ssl.batch, aape.f, aape.t, data_seed);
    let mut state = TrainState::new(&model, seed);
    let mut log = Vec::with_capacity(ssl.steps);
    for _ in 0..ssl.steps {
        let out = pretrain_step(&model, &mut state, &batch)?;
        on_step(&out);
        log.push(out);
    }
    Ok((model, state, log))
}

pub fn loss_csv(log: &[StepOutput]) -> String {
    let mut s = String::from("step,l_total,l_m,l_u,l_c,lr,xi\n");
    for o in log {
        let r = &o.report;
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            o.step, r.l_total, r.l_m, r.l_u, r.l_c, o.lr, o.xi
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aape::AapeConfig;
    use crate::ssl::synth::synth_batch;
    use crate::ssl::SslConfig;

    #[test]
    fn step_runs_and_is_deterministic() {
        let model = Model::new(&AapeConfig::toy(), &SslConfig::toy()).unwrap();
        let batch = synth_batch(2, 32, 64, 3);
        let mut a = TrainState::new(&model, 9);
        let mut b = TrainState::new(&model, 9);
        for _ in 0..2 {
            let ra = pretrain_step(&model, &mut a, &batch).unwrap();
            let rb = pretrain_step(&model, &mut b, &batch).unwrap();
            assert_eq!(ra.report.l_total.to_bits(), rb.report.l_total.to_bits());
            assert_eq!(ra.teacher_grads_present, 0);
            assert_eq!(ra.teacher_grad_max, 0.0);
            assert!(ra.report.l_c > 0.0);
        }
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher.step, 2);
    }
}
