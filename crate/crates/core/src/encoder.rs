//! Per-slot spatio-temporal features: time-of-day and day-of-week tables,
//! a location table plus an affine map of normalized cell coordinates, each
//! branch projected to the model width and summed.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{GridSpec, Timestamp, SLOTS_PER_DAY};
use crate::numerics::{init, NumericsError, ParamRef, ParamSet, Tape, Tensor, Var};

const TABLE_INIT_BOUND: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Widths of the embedding tables and the coordinate map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub time_of_day: usize,
    pub day_of_week: usize,
    pub location: usize,
    pub coord: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self { time_of_day: 128, day_of_week: 128, location: 256, coord: 128 }
    }
}

impl EncoderDims {
    pub fn temporal_width(&self) -> usize {
        self.time_of_day + self.day_of_week
    }

    pub fn spatial_width(&self) -> usize {
        self.location + self.coord
    }
}

/// Handles to the encoder's tensors inside a parameter set. Projections are
/// stored `[in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub model_dim: usize,
    pub grid: GridSpec,
    pub time_of_day: ParamRef,
    pub day_of_week: ParamRef,
    pub location: ParamRef,
    pub coord_weight: ParamRef,
    pub coord_bias: ParamRef,
    pub temporal_proj: ParamRef,
    pub spatial_proj: ParamRef,
}

impl EncoderParams {
    /// Appends freshly initialized encoder tensors to `set`.
    pub fn register<R: Rng + ?Sized>(
        set: &mut ParamSet,
        dims: EncoderDims,
        model_dim: usize,
        grid: GridSpec,
        rng: &mut R,
    ) -> Self {
        let mut add = |name: &str, t: Tensor| ParamRef::Trainable(set.push(format!("encoder.{name}"), t));
        let time_of_day = add("time_of_day", init::uniform(&[SLOTS_PER_DAY, dims.time_of_day], TABLE_INIT_BOUND, rng));
        let day_of_week = add("day_of_week", init::uniform(&[7, dims.day_of_week], TABLE_INIT_BOUND, rng));
        let location =
            add("location", init::uniform(&[grid.vocabulary_size(), dims.location], TABLE_INIT_BOUND, rng));
        let coord_weight = add("coord_weight", init::scaled_normal(2, dims.coord, rng));
        let coord_bias = add("coord_bias", Tensor::zeros(&[dims.coord]));
        let temporal_proj = add("temporal_proj", init::scaled_normal(dims.temporal_width(), model_dim, rng));
        let spatial_proj = add("spatial_proj", init::scaled_normal(dims.spatial_width(), model_dim, rng));
        Self {
            dims,
            model_dim,
            grid,
            time_of_day,
            day_of_week,
            location,
            coord_weight,
            coord_bias,
            temporal_proj,
            spatial_proj,
        }
    }

    /// Handles of the spatial branch.
    pub fn spatial_refs(&self) -> [ParamRef; 4] {
        [self.location, self.coord_weight, self.coord_bias, self.spatial_proj]
    }

    /// Records temporal encodings for a run of timestamps: `[n x D]`.
    pub fn temporal_rows(&self, tape: &mut Tape<'_>, times: &[Timestamp]) -> Result<Var, EncoderError> {
        let mut slots = Vec::with_capacity(times.len());
        let mut dows = Vec::with_capacity(times.len());
        for t in times {
            if t.slot as usize >= SLOTS_PER_DAY {
                return Err(EncoderError::IndexOutOfRange { what: "slot", index: t.slot as usize, bound: SLOTS_PER_DAY });
            }
            slots.push(t.slot as usize);
            dows.push(t.dow() as usize);
        }
        self.temporal_from_indices(tape, slots, dows)
    }

    fn temporal_from_indices(&self, tape: &mut Tape<'_>, slots: Vec<usize>, dows: Vec<usize>) -> Result<Var, EncoderError> {
        // Projecting each table through its half of the projection equals
        // projecting the concatenated row.
        let proj = tape.param(self.temporal_proj);
        let proj_tod = tape.slice_rows(proj, 0, self.dims.time_of_day)?;
        let proj_dow = tape.slice_rows(proj, self.dims.time_of_day, self.dims.day_of_week)?;
        let tod = tape.param(self.time_of_day);
        let dow = tape.param(self.day_of_week);
        let tod = tape.matmul(tod, proj_tod)?;
        let dow = tape.matmul(dow, proj_dow)?;
        let a = tape.gather_rows(tod, slots)?;
        let b = tape.gather_rows(dow, dows)?;
        Ok(tape.add(a, b)?)
    }

    /// Records spatial encodings for a list of location ids: `[m x D]`.
    pub fn spatial_rows(&self, tape: &mut Tape<'_>, ids: &[u32]) -> Result<Var, EncoderError> {
        let vocab = self.grid.vocabulary_size();
        let mut coords = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let (cx, cy) = self
                .grid
                .normalized_center(id)
                .map_err(|_| EncoderError::IndexOutOfRange { what: "location", index: id as usize, bound: vocab })?;
            coords.extend([cx, cy]);
        }
        let coords = tape.constant(Tensor::matrix(ids.len(), 2, coords)?)?;
        let w = tape.param(self.coord_weight);
        let b = tape.param(self.coord_bias);
        let c = tape.matmul(coords, w)?;
        let c = tape.add_row(c, b)?;
        let table = tape.param(self.location);
        let loc = tape.gather_rows(table, ids.iter().map(|&i| i as usize).collect())?;
        let cat = tape.concat_cols(&[loc, c])?;
        let proj = tape.param(self.spatial_proj);
        Ok(tape.matmul(cat, proj)?)
    }

    /// Records per-slot encodings: temporal rows plus, where a location is
    /// observed, its spatial encoding. Unobserved rows are exact copies of
    /// their temporal encoding.
    pub fn observation_rows(
        &self,
        tape: &mut Tape<'_>,
        times: &[Timestamp],
        locations: &[Option<u32>],
    ) -> Result<Var, EncoderError> {
        if times.len() != locations.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "observation_rows",
                left: vec![times.len()],
                right: vec![locations.len()],
            }
            .into());
        }
        let temporal = self.temporal_rows(tape, times)?;
        let mut unique: BTreeMap<u32, usize> = BTreeMap::new();
        for &id in locations.iter().flatten() {
            unique.entry(id).or_insert(0);
        }
        if unique.is_empty() {
            return Ok(temporal);
        }
        let ids: Vec<u32> = unique.keys().copied().collect();
        for (pos, slot) in unique.values_mut().enumerate() {
            *slot = pos;
        }
        let spatial = self.spatial_rows(tape, &ids)?;
        let index = locations.iter().map(|l| l.map(|id| unique[&id])).collect();
        Ok(tape.scatter_add_rows(temporal, spatial, index)?)
    }
}

fn eval<F>(params: &ParamSet, f: F) -> Result<Vec<f64>, EncoderError>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var, EncoderError>,
{
    let frozen = ParamSet::new();
    let mut tape = Tape::with_params(params, &frozen);
    let v = f(&mut tape)?;
    Ok(tape.value(v).data().to_vec())
}

/// Temporal encoding of one `(slot, day-of-week)` pair.
pub fn encode_temporal(params: &ParamSet, enc: &EncoderParams, slot: usize, dow: usize) -> Result<Vec<f64>, EncoderError> {
    if slot >= SLOTS_PER_DAY {
        return Err(EncoderError::IndexOutOfRange { what: "slot", index: slot, bound: SLOTS_PER_DAY });
    }
    if dow >= 7 {
        return Err(EncoderError::IndexOutOfRange { what: "day of week", index: dow, bound: 7 });
    }
    eval(params, |tape| enc.temporal_from_indices(tape, vec![slot], vec![dow]))
}

/// Spatial encoding of a location; `None` yields the zero vector.
pub fn encode_spatial(params: &ParamSet, enc: &EncoderParams, location: Option<u32>) -> Result<Vec<f64>, EncoderError> {
    match location {
        None => Ok(vec![0.0; enc.model_dim]),
        Some(id) => eval(params, |tape| enc.spatial_rows(tape, &[id])),
    }
}

/// Sum of the temporal and spatial encodings of one slot.
pub fn encode_observation(
    params: &ParamSet,
    enc: &EncoderParams,
    slot: usize,
    dow: usize,
    location: Option<u32>,
) -> Result<Vec<f64>, EncoderError> {
    let temporal = encode_temporal(params, enc, slot, dow)?;
    match location {
        None => Ok(temporal),
        Some(_) => {
            let spatial = encode_spatial(params, enc, location)?;
            Ok(temporal.iter().zip(&spatial).map(|(a, b)| a + b).collect())
        }
    }
}
