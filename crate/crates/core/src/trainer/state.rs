use std::path::Path;

use super::PretrainConfig;
use crate::data::checkpoint::{check_names, Checkpoint};
use crate::data::{rng, ConfigMap, Streams};
use crate::model::ModelConfig;
use crate::tensor::{Moments, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Learnable parameters, the EMA teacher, optimizer moments and the step
/// counter. Randomness is not stored: every draw comes from a named stream
/// indexed by step, so the seed is enough to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: u64,
    pub student: ParamStore<T>,
    /// Copy of the student's tokenizer and encoder tensors.
    pub teacher: ParamStore<T>,
    /// One entry per student tensor, in store order.
    pub moments: Vec<Moments<T>>,
    pub seed: u64,
    pub config_hash: String,
}

impl<T: Real> TrainState<T> {
    pub fn init(model: &ModelConfig, seed: u64, config_hash: String) -> Result<Self> {
        let student = model.init_params::<T>(&mut Streams::new(seed).get(rng::INIT, 0))?;
        let teacher = student.filter(ModelConfig::is_encoder_param);
        let moments = student.iter().map(|(_, t)| Moments::zeros(t.len())).collect();
        Ok(Self {
            step: 0,
            student,
            teacher,
            moments,
            seed,
            config_hash,
        })
    }

    pub fn for_config(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::init(&cfg.model, cfg.seed, cfg.hash())
    }

    /// Asserts the teacher mirrors the student's encoder tensor-for-tensor.
    pub fn check_teacher_shapes(&self) -> Result<()> {
        let enc: Vec<&str> = self.student.names().filter(|n| ModelConfig::is_encoder_param(n)).collect();
        let teach: Vec<&str> = self.teacher.names().collect();
        if enc != teach {
            return Err(Error::Checkpoint("teacher tensors do not mirror the student encoder".into()));
        }
        for n in enc {
            if self.student.get(n)?.shape() != self.teacher.get(n)?.shape() {
                return Err(Error::Checkpoint(format!("teacher tensor `{n}` has a different shape")));
            }
        }
        Ok(())
    }
}

fn moments_store(student: &ParamStore<f32>, moments: &[Moments<f32>], first: bool) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for ((name, t), m) in student.iter().zip(moments) {
        let data = if first { m.m.clone() } else { m.v.clone() };
        out.insert(name, Tensor::new(t.shape().to_vec(), data).expect("moment length matches tensor"));
    }
    out
}

impl TrainState<f32> {
    pub fn to_checkpoint(&self, config: &ConfigMap) -> Checkpoint {
        Checkpoint {
            step: self.step,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            config_text: config.serialize(),
            sections: vec![
                ("student".into(), self.student.clone()),
                ("teacher".into(), self.teacher.clone()),
                ("adam.m".into(), moments_store(&self.student, &self.moments, true)),
                ("adam.v".into(), moments_store(&self.student, &self.moments, false)),
            ],
        }
    }

    /// Restores a state, validating every tensor against `model`.
    pub fn from_checkpoint(ck: &Checkpoint, model: &ModelConfig) -> Result<Self> {
        let shapes = model.param_shapes();
        let enc: Vec<(String, Vec<usize>)> = shapes
            .iter()
            .filter(|(n, _)| ModelConfig::is_encoder_param(n))
            .cloned()
            .collect();
        let student = ck.section("student")?.clone();
        check_names("student", &student, &shapes)?;
        let teacher = ck.section("teacher")?.clone();
        check_names("teacher", &teacher, &enc)?;
        let m = ck.section("adam.m")?;
        let v = ck.section("adam.v")?;
        check_names("adam.m", m, &shapes)?;
        check_names("adam.v", v, &shapes)?;
        // store order follows the model so optimizer updates line up
        let mut ordered = ParamStore::new();
        let mut ordered_teacher = ParamStore::new();
        let mut moments = Vec::with_capacity(shapes.len());
        for (name, _) in &shapes {
            ordered.insert(name.clone(), student.get(name)?.clone());
            moments.push(Moments {
                m: m.get(name)?.data().to_vec(),
                v: v.get(name)?.data().to_vec(),
            });
            if ModelConfig::is_encoder_param(name) {
                ordered_teacher.insert(name.clone(), teacher.get(name)?.clone());
            }
        }
        Ok(Self {
            step: ck.step,
            student: ordered,
            teacher: ordered_teacher,
            moments,
            seed: ck.seed,
            config_hash: ck.config_hash.clone(),
        })
    }

    pub fn save(&self, config: &ConfigMap, path: &Path) -> Result<()> {
        self.to_checkpoint(config).save(path)
    }
}
