//! Metrics over every frame of every validation video.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::sequence::PoseSequence;

use super::model::Model;
use super::predict::{predict_video, VideoPrediction};

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "BONEKIN_THREADS";

fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

/// Predictions for every video, computed in parallel and returned in input
/// order.
pub fn predict_all(model: &Model, videos: &[PoseSequence]) -> Result<Vec<VideoPrediction>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| videos.par_iter().enumerate().map(|(i, v)| predict_video(model, v, i)).collect())
}

pub fn report(predictions: &[VideoPrediction], videos: &[PoseSequence]) -> Result<MetricReport> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no videos to evaluate".into()));
    }
    let pairs: Vec<_> = predictions.iter().zip(videos).map(|(p, v)| (&p.poses[..], &v.poses3d[..])).collect();
    MetricReport::from_sequences(&pairs)
}

pub fn evaluate(model: &Model, videos: &[PoseSequence]) -> Result<MetricReport> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no videos to evaluate".into()));
    }
    report(&predict_all(model, videos)?, videos)
}
