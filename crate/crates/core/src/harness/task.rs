//! Synthetic teacher-student and classification tasks.

use crate::error::{invalid, Result};
use crate::moe::{MoeConfig, MoeModel, Targets};
use crate::numcore::{topk_slice, RngStream, StreamKind, Tensor};

use super::config::{TaskKind, TaskSpec};

/// Inputs, targets and the frozen teacher that produced them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: TaskKind,
    pub teacher: MoeModel,
    pub train_inputs: Tensor,
    pub train_targets: Targets,
    pub eval_inputs: Tensor,
    pub eval_targets: Targets,
}

fn sample_inputs(n: usize, d: usize, spec: &TaskSpec, rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(&[n, d], |_| spec.input_mean + spec.input_std * rng.normal())
}

/// Teacher with routing warmup already over, so its outputs are noise free.
pub fn make_teacher(model: &MoeConfig, seed: u64) -> Result<MoeModel> {
    let mut teacher = MoeModel::new(model.clone(), 0, &mut RngStream::named(seed, StreamKind::Task, 0))?;
    teacher.router.global_step = 1;
    Ok(teacher)
}

/// Runs the teacher over `inputs` and turns its logits into targets.
pub fn label(teacher: &MoeModel, inputs: &Tensor, kind: TaskKind, noise_std: f64, noise: &mut RngStream) -> Result<Targets> {
    let logits = teacher.forward(inputs, &mut RngStream::new(0, 0))?.logits;
    Ok(match kind {
        TaskKind::TeacherStudent => {
            let mut y = logits;
            if noise_std > 0.0 {
                y.data_mut().iter_mut().for_each(|v| *v += noise_std * noise.normal());
            }
            Targets::Regression(y)
        }
        TaskKind::Classification => {
            let mut labels = Vec::with_capacity(logits.rows());
            for r in 0..logits.rows() {
                labels.push(topk_slice(logits.row(r), 1)?[0].0);
            }
            Targets::Classes(labels)
        }
    })
}

/// Builds the dataset as a pure function of `(spec, model, seed)`.
pub fn generate_task(spec: &TaskSpec, model: &MoeConfig, seed: u64) -> Result<Dataset> {
    if spec.n_train == 0 || spec.n_eval == 0 || !(spec.input_std > 0.0) {
        return Err(invalid("task needs positive sizes and input_std"));
    }
    let teacher = make_teacher(model, seed)?;
    let d = model.d_model;
    let train_inputs = sample_inputs(spec.n_train, d, spec, &mut RngStream::named(seed, StreamKind::Task, 1));
    let eval_inputs = sample_inputs(spec.n_eval, d, spec, &mut RngStream::named(seed, StreamKind::Task, 2));
    let train_targets =
        label(&teacher, &train_inputs, spec.kind, spec.target_noise, &mut RngStream::named(seed, StreamKind::Task, 3))?;
    let eval_targets =
        label(&teacher, &eval_inputs, spec.kind, spec.target_noise, &mut RngStream::named(seed, StreamKind::Task, 4))?;
    Ok(Dataset { kind: spec.kind, teacher, train_inputs, train_targets, eval_inputs, eval_targets })
}

/// Copies the listed rows out of a batch of targets.
pub fn gather_targets(targets: &Targets, rows: &[usize]) -> Result<Targets> {
    Ok(match targets {
        Targets::Regression(y) => Targets::Regression(gather_rows(y, rows)?),
        Targets::Classes(l) => Targets::Classes(rows.iter().map(|&r| l[r]).collect()),
    })
}

pub fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let cols = x.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        if r >= x.rows() {
            return Err(invalid(format!("row {r} out of range")));
        }
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), cols], data)
}

impl Dataset {
    /// Training-row indices of batch `id`; every id owns its own data stream.
    pub fn batch_rows(&self, seed: u64, id: u64, size: usize) -> Result<Vec<usize>> {
        let sub = u32::try_from(id).map_err(|_| invalid(format!("batch id {id} exceeds the data stream range")))?;
        let mut rng = RngStream::named(seed, StreamKind::Data, sub);
        let n = self.train_inputs.rows();
        Ok((0..size).map(|_| rng.below(n)).collect())
    }

    pub fn rows(&self, rows: &[usize]) -> Result<(Tensor, Targets)> {
        Ok((gather_rows(&self.train_inputs, rows)?, gather_targets(&self.train_targets, rows)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeParams;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec { kind, n_train: 256, n_eval: 64, ..TaskSpec::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for kind in [TaskKind::TeacherStudent, TaskKind::Classification] {
            let a = generate_task(&spec(kind), &MoeConfig::default(), 5).unwrap();
            let b = generate_task(&spec(kind), &MoeConfig::default(), 5).unwrap();
            assert_eq!(a.train_inputs, b.train_inputs);
            assert_eq!(a.train_targets, b.train_targets);
            assert_eq!(a.eval_targets, b.eval_targets);
            let c = generate_task(&spec(kind), &MoeConfig::default(), 6).unwrap();
            assert_ne!(a.train_inputs, c.train_inputs);
        }
    }

    #[test]
    fn teacher_parameters_reach_zero_loss() {
        let data = generate_task(&spec(TaskKind::TeacherStudent), &MoeConfig::default(), 2).unwrap();
        let mut student = MoeModel::new(MoeConfig::default(), 0, &mut RngStream::new(99, 1)).unwrap();
        student.router.global_step = 1;
        student.set_params(data.teacher.params().clone()).unwrap();
        let logits = student.forward(&data.train_inputs, &mut RngStream::new(1, 1)).unwrap().logits;
        assert_eq!(data.train_targets.loss(&logits).unwrap().0, 0.0);

        let fresh = MoeParams::init(&MoeConfig::default(), &mut RngStream::new(99, 1)).unwrap();
        student.set_params(fresh).unwrap();
        let logits = student.forward(&data.train_inputs, &mut RngStream::new(1, 1)).unwrap().logits;
        assert!(data.train_targets.loss(&logits).unwrap().0 > 0.0);
    }

    #[test]
    fn input_statistics_match_spec() {
        let s = TaskSpec { n_train: 100_000, n_eval: 1, input_mean: 0.7, input_std: 2.0, ..TaskSpec::default() };
        let cfg = MoeConfig { d_model: 2, ..MoeConfig::default() };
        let x = sample_inputs(s.n_train, cfg.d_model, &s, &mut RngStream::named(4, StreamKind::Task, 1));
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.7).abs() < 0.01 * 0.7, "mean {mean}");
        assert!((var - 4.0).abs() < 0.01 * 4.0, "var {var}");
    }

    #[test]
    fn classification_labels_are_teacher_argmax() {
        let data = generate_task(&spec(TaskKind::Classification), &MoeConfig::default(), 3).unwrap();
        let logits = data.teacher.forward(&data.eval_inputs, &mut RngStream::new(0, 0)).unwrap().logits;
        let Targets::Classes(labels) = &data.eval_targets else { panic!("expected classes") };
        for (r, &l) in labels.iter().enumerate() {
            assert!(logits.row(r).iter().all(|&v| v <= logits.row(r)[l]));
        }
    }

    #[test]
    fn batch_rows_depend_only_on_id() {
        let data = generate_task(&spec(TaskKind::TeacherStudent), &MoeConfig::default(), 1).unwrap();
        assert_eq!(data.batch_rows(1, 7, 16).unwrap(), data.batch_rows(1, 7, 16).unwrap());
        assert_ne!(data.batch_rows(1, 7, 16).unwrap(), data.batch_rows(1, 8, 16).unwrap());
        assert!(data.batch_rows(1, 1 << 40, 4).is_err());
    }
}
