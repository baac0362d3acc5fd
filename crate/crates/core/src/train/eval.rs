//! Inference, evaluation reports and single-image prediction.

use crate::data::augment::resize_only;
use crate::data::Sample;
use crate::metrics::{confusion, metrics, report_csv, MetricReport};
use crate::model::{BaNet, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::kernels::{bilinear_resize_forward, sigmoid};
use crate::tensor::{Tape, Tensor};
use crate::Error;

/// Build the network for `cfg` and fill it from a checkpoint file.
pub fn load_model(cfg: &ModelConfig, checkpoint: &std::path::Path) -> Result<(BaNet, ParameterStore<f32>), Error> {
    use rand::SeedableRng;
    let mut store = ParameterStore::new();
    let net = BaNet::new(cfg, &mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    super::checkpoint::load_checkpoint(&mut store, checkpoint)?;
    Ok((net, store))
}

/// Foreground probabilities `[1,1,H,W]` for an image whose sides are
/// divisible by 8.
pub fn predict_probabilities(net: &BaNet, store: &ParameterStore<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>, Error> {
    let mut tape = Tape::<f32>::new();
    let params = store.bind(&mut tape);
    let x = tape.constant(image.clone());
    let out = net.forward(&mut tape, &params, x)?;
    Ok(tape.value(out.seg_logits).map(sigmoid))
}

/// Per-image scores on `data`, each sample resized to `out_size` first.
pub fn evaluate(
    net: &BaNet,
    store: &ParameterStore<f32>,
    data: &[Sample],
    threshold: f64,
    out_size: usize,
) -> Result<Vec<(String, MetricReport)>, Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.iter()
        .map(|s| {
            let s = resize_only(s, out_size, 1)?;
            let prob = predict_probabilities(net, store, &s.image)?;
            Ok((s.id.clone(), metrics(confusion(&prob, &s.seg_mask, threshold)?)))
        })
        .collect()
}

/// [`evaluate`] rendered as the report CSV.
pub fn evaluate_csv(
    net: &BaNet,
    store: &ParameterStore<f32>,
    data: &[Sample],
    threshold: f64,
    out_size: usize,
) -> Result<String, Error> {
    report_csv(&evaluate(net, store, data, threshold, out_size)?)
}

/// Binary mask at the input image's resolution: the image is resized to
/// `out_size`, the probability map resized back, then thresholded.
pub fn predict_mask(
    net: &BaNet,
    store: &ParameterStore<f32>,
    image: &Tensor<f32>,
    threshold: f64,
    out_size: usize,
) -> Result<Tensor<f32>, Error> {
    let s = image.shape();
    let resized = if (s.h(), s.w()) == (out_size, out_size) {
        image.clone()
    } else {
        bilinear_resize_forward(image, out_size, out_size)?
    };
    let mut prob = predict_probabilities(net, store, &resized)?;
    if (s.h(), s.w()) != (out_size, out_size) {
        prob = bilinear_resize_forward(&prob, s.h(), s.w())?;
    }
    Ok(prob.map(|p| if p as f64 >= threshold { 1.0 } else { 0.0 }))
}
