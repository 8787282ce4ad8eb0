//! Glue between trained encoders, the index and evaluation.

use crate::encoders::{encode_image, encode_shape};
use crate::geometry::ViewFeature;
use crate::index::{build_index, ShapeIndex};
use crate::metrics::{evaluate, EvalQuery, EvalReport};
use crate::trainer::TrainTuple;
use crate::{EncoderParams, Result};

/// Embeds every cloud with the shape branch and indexes it under the
/// checkpoint fingerprint of `params`.
pub fn build_shape_index(params: &EncoderParams, tuples: &[TrainTuple]) -> Result<ShapeIndex> {
    let items = tuples
        .iter()
        .map(|t| Ok((t.shape_id.clone(), t.class_id.clone(), encode_shape(params, &t.cloud)?)))
        .collect::<Result<Vec<_>>>()?;
    build_index(items, params.fingerprint())
}

/// One query per view of every tuple.
pub fn view_queries(params: &EncoderParams, tuples: &[TrainTuple]) -> Result<Vec<EvalQuery>> {
    tuples
        .iter()
        .flat_map(|t| t.views.iter().map(move |v| (t, v)))
        .map(|(t, v)| query_for(params, &t.shape_id, &t.class_id, v))
        .collect()
}

pub fn query_for(params: &EncoderParams, shape_id: &str, class_id: &str, view: &ViewFeature) -> Result<EvalQuery> {
    Ok(EvalQuery {
        embedding: encode_image(params, view)?,
        shape_id: shape_id.to_string(),
        class_id: class_id.to_string(),
    })
}

/// A database of shapes plus held-out query views.
#[derive(Clone, Debug)]
pub struct RetrievalTask {
    pub database: Vec<TrainTuple>,
    pub queries: Vec<TrainTuple>,
    pub k: usize,
}

impl RetrievalTask {
    pub fn new(database: Vec<TrainTuple>, queries: Vec<TrainTuple>, k: usize) -> Self {
        Self { database, queries, k }
    }

    pub fn run(&self, params: &EncoderParams) -> Result<EvalReport> {
        let index = build_shape_index(params, &self.database)?;
        evaluate(&index, &view_queries(params, &self.queries)?, self.k)
    }
}
