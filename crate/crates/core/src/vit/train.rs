//! Teacher/student distillation of the token banks.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{forward, vpt_forward, Forward, InputGrads};
use super::loss::{contrastive_distill_loss_grad, DEFAULT_TEMPERATURE};
use super::params::BaseParameters;
use super::tokens::LRTokenBank;
use crate::degrade::{degrade, PreprocessSpec};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpec {
    buckets: Vec<(usize, usize)>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec {
            buckets: vec![(16, 32), (32, 64), (64, 128)],
        }
    }
}

impl BucketSpec {
    pub fn new(buckets: Vec<(usize, usize)>) -> Result<Self> {
        if buckets.is_empty() {
            return Err(Error::validation("at least one resolution bucket is required"));
        }
        if let Some((lo, hi)) = buckets.iter().find(|(lo, hi)| *lo == 0 || lo >= hi) {
            return Err(Error::validation(format!(
                "bucket [{lo},{hi}] must satisfy 0 < lo < hi"
            )));
        }
        Ok(BucketSpec { buckets })
    }

    pub fn buckets(&self) -> &[(usize, usize)] {
        &self.buckets
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// The first `count` buckets.
    pub fn prefix(&self, count: usize) -> Result<Self> {
        Self::new(self.buckets[..count.min(self.buckets.len())].to_vec())
    }
}

impl FromStr for BucketSpec {
    type Err = Error;

    /// `"16:32,32:64"`.
    fn from_str(s: &str) -> Result<Self> {
        let buckets = s
            .split(',')
            .map(|part| {
                let (lo, hi) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::validation(format!("bucket '{part}' is not lo:hi")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::validation(format!("bad bucket bound '{v}'")))
                };
                Ok((parse(lo)?, parse(hi)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(buckets)
    }
}

impl fmt::Display for BucketSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.buckets.iter().map(|(lo, hi)| format!("{lo}:{hi}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Downsample to `n` and restore the original size.
pub fn degrade_to(img: &Image, n: usize) -> Result<Image> {
    degrade(img, &PreprocessSpec::unnormalized(n, img.height()))
}

/// One resolution drawn uniformly from each bucket, inclusive of both ends,
/// with the degraded image restored to the input size.
pub fn sample_multiscale<R: Rng + ?Sized>(
    img: &Image,
    buckets: &BucketSpec,
    rng: &mut R,
) -> Result<Vec<(usize, Image)>> {
    buckets
        .buckets()
        .iter()
        .map(|&(lo, hi)| {
            let n = rng.random_range(lo..=hi);
            Ok((n, degrade_to(img, n)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub hr_images: Vec<Image>,
    /// `lr_images[bucket][i]` is derived from `hr_images[i]`.
    pub lr_images: Vec<Vec<Image>>,
    pub resolutions: Vec<Vec<usize>>,
}

impl TrainBatch {
    pub fn sample<R: Rng + ?Sized>(hr_images: &[Image], buckets: &BucketSpec, rng: &mut R) -> Result<Self> {
        let mut lr_images = vec![Vec::with_capacity(hr_images.len()); buckets.len()];
        let mut resolutions = vec![Vec::with_capacity(hr_images.len()); buckets.len()];
        for img in hr_images {
            for (b, (n, lr)) in sample_multiscale(img, buckets, rng)?.into_iter().enumerate() {
                lr_images[b].push(lr);
                resolutions[b].push(n);
            }
        }
        Ok(TrainBatch {
            hr_images: hr_images.to_vec(),
            lr_images,
            resolutions,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.hr_images.len()
    }

    fn validate(&self, res: usize) -> Result<()> {
        let b = self.batch_size();
        if self.lr_images.iter().any(|set| set.len() != b) {
            return Err(Error::validation("every bucket needs one LR image per HR image"));
        }
        let all = self.hr_images.iter().chain(self.lr_images.iter().flatten());
        if all.into_iter().any(|img| img.height() != res || img.width() != res) {
            return Err(Error::validation(format!("batch images must be {res}x{res}")));
        }
        Ok(())
    }

    /// Student inputs: the HR images followed by each bucket.
    fn student_sets(&self) -> impl Iterator<Item = &Vec<Image>> {
        std::iter::once(&self.hr_images).chain(self.lr_images.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub temperature: f64,
    pub learning_rate: f64,
    pub start_block: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            temperature: DEFAULT_TEMPERATURE,
            learning_rate: 1e-2,
            start_block: 0,
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Student<'a> {
    Tokens(&'a LRTokenBank, usize),
    Prompts(&'a Array2<f64>),
}

impl Student<'_> {
    fn run(&self, params: &BaseParameters, img: &Image) -> Result<Forward> {
        match *self {
            Student::Tokens(t, start) => forward(params, Some(t), img, start),
            Student::Prompts(p) => vpt_forward(params, p, img),
        }
    }
}

fn rows(embeddings: Vec<Vec<f64>>, dim: usize) -> Array2<f64> {
    let n = embeddings.len();
    Array2::from_shape_vec((n, dim), embeddings.into_iter().flatten().collect()).expect("uniform widths")
}

pub fn teacher_features(params: &BaseParameters, images: &[Image]) -> Result<Array2<f64>> {
    let emb = images
        .par_iter()
        .map(|img| forward(params, None, img, 0).map(|f| f.embedding))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows(emb, params.config.embed_dim_out))
}

fn add_into(acc: &mut Option<Array2<f64>>, g: &Option<Array2<f64>>) {
    if let Some(g) = g {
        match acc {
            Some(a) => *a += g,
            None => *acc = Some(g.clone()),
        }
    }
}

/// Loss and summed input gradients for a student configuration.
pub(crate) fn distill(
    params: &BaseParameters,
    student: Student<'_>,
    batch: &TrainBatch,
    tau: f64,
    with_grad: bool,
) -> Result<(f64, Option<InputGrads>)> {
    batch.validate(params.config.input_res)?;
    let teacher = teacher_features(params, &batch.hr_images)?;
    let inputs: Vec<(usize, &Image)> = batch
        .student_sets()
        .enumerate()
        .flat_map(|(s, set)| set.iter().map(move |img| (s, img)))
        .collect();
    let passes = inputs
        .par_iter()
        .map(|(_, img)| student.run(params, img))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.batch_size();
    let dim = params.config.embed_dim_out;
    let sets: Vec<Array2<f64>> = passes
        .chunks(b)
        .map(|chunk| rows(chunk.iter().map(|f| f.embedding.clone()).collect(), dim))
        .collect();
    let (loss, grads) = contrastive_distill_loss_grad(&sets, &teacher, tau)?;
    if !with_grad {
        return Ok((loss, None));
    }
    let per_pass: Vec<InputGrads> = passes
        .par_iter()
        .enumerate()
        .map(|(k, f)| {
            let row = grads[k / b].row(k % b);
            f.backward(params, row.as_slice().expect("standard layout"))
        })
        .collect();
    let mut total = InputGrads {
        banks: vec![None; params.config.num_banks()],
        prompts: None,
    };
    for g in &per_pass {
        for (acc, gb) in total.banks.iter_mut().zip(&g.banks) {
            add_into(acc, gb);
        }
        add_into(&mut total.prompts, &g.prompts);
    }
    Ok((loss, Some(total)))
}

/// Distillation loss of the token banks on `batch`, without gradients.
pub fn distill_loss(params: &BaseParameters, tokens: &LRTokenBank, batch: &TrainBatch, opts: &TrainOptions) -> Result<f64> {
    Ok(distill(params, Student::Tokens(tokens, opts.start_block), batch, opts.temperature, false)?.0)
}

/// Loss and gradient for every bank; inactive banks get `None`.
pub fn token_gradients(
    params: &BaseParameters,
    tokens: &LRTokenBank,
    batch: &TrainBatch,
    opts: &TrainOptions,
) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
    let (loss, grads) = distill(params, Student::Tokens(tokens, opts.start_block), batch, opts.temperature, true)?;
    Ok((loss, grads.expect("requested").banks))
}

/// One plain gradient-descent update of the active banks. Returns the loss
/// before the update.
pub fn train_step(
    params: &BaseParameters,
    tokens: &mut LRTokenBank,
    batch: &TrainBatch,
    opts: &TrainOptions,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = token_gradients(params, tokens, batch, opts)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss = {loss}"),
        });
    }
    if let Some(b) = grads
        .iter()
        .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient of token bank {b}"),
        });
    }
    tokens.descend(&grads, opts.learning_rate);
    Ok(loss)
}

/// Runs `steps` updates, resampling LR resolutions each step. `on_step`
#[allow(clippy::too_many_arguments)]
/// receives the zero-based step index and the loss.
pub fn train(
    params: &BaseParameters,
    tokens: &mut LRTokenBank,
    images: &[Image],
    buckets: &BucketSpec,
    opts: &TrainOptions,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if opts.start_block > params.config.depth {
        return Err(Error::validation(format!(
            "start block {} exceeds depth {}",
            opts.start_block, params.config.depth
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = TrainBatch::sample(images, buckets, &mut rng)?;
        let loss = train_step(params, tokens, &batch, opts, step)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean cosine between the student on images degraded to `n` and the
/// teacher on the originals.
pub fn mean_cosine(
    params: &BaseParameters,
    tokens: Option<&LRTokenBank>,
    images: &[Image],
    n: usize,
    start_block: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::validation("no images"));
    }
    let teacher = teacher_features(params, images)?;
    let sims = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let lr = degrade_to(img, n)?;
            let f = forward(params, tokens, &lr, start_block)?;
            Ok(f.embedding.iter().zip(teacher.row(i)).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}
