//! Events and the two synchronous event representations used for tracking:
//! the polarity time surface and the binary event mat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, ImageF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn from_sign(v: f64) -> Self {
        if v >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

/// A single brightness-change event at integer pixel `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Time-ordered events from a `width × height` sensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
}

impl EventStream {
    /// Validates bounds and timestamp order.
    pub fn new(events: Vec<Event>, width: usize, height: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::param(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if !e.t.is_finite() {
                return Err(Error::param(format!("event {i} has non-finite timestamp")));
            }
            if i > 0 && e.t < events[i - 1].t {
                return Err(Error::param(format!(
                    "event {i} timestamp {} precedes {}",
                    e.t,
                    events[i - 1].t
                )));
            }
        }
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.t)
    }

    /// Index of the first event with `t >= time`.
    pub fn lower_bound(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t < time)
    }

    /// Index one past the last event with `t <= time`.
    pub fn upper_bound(&self, time: f64) -> usize {
        self.events.partition_point(|e| e.t <= time)
    }

    /// Events with `t0 <= t <= t1`.
    pub fn window(&self, t0: f64, t1: f64) -> &[Event] {
        let a = self.lower_bound(t0);
        let b = self.upper_bound(t1).max(a);
        &self.events[a..b]
    }
}

/// Signed exponential-decay time surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSurface {
    /// `p · exp(−(t_ref − t_last)/η)` per pixel, `0` where nothing fired.
    pub values: ImageF,
    /// Timestamp of the last event per pixel, NaN where nothing fired.
    pub t_last: ImageF,
    pub t_ref: f64,
    pub eta: f64,
}

impl TimeSurface {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    /// `|values|`, the non-negative image consumed by corner detection and flow.
    pub fn magnitude(&self) -> ImageF {
        self.values.abs()
    }
}

/// Builds the time surface at `t_ref` from all events with `t <= t_ref`.
pub fn build_time_surface(stream: &EventStream, t_ref: f64, eta: f64) -> Result<TimeSurface> {
    let mut builder = TimeSurfaceBuilder::new(stream.width(), stream.height(), eta)?;
    if let Some(t0) = stream.first_time() {
        if t_ref < t0 {
            return Err(Error::param(format!(
                "reference time {t_ref} precedes the first event at {t0}"
            )));
        }
    }
    builder.ingest(&stream.events()[..stream.upper_bound(t_ref)]);
    Ok(builder.snapshot(t_ref))
}

/// Incremental per-pixel last-event memory for streaming use.
#[derive(Debug, Clone)]
pub struct TimeSurfaceBuilder {
    t_last: ImageF,
    sign: Grid<i8>,
    eta: f64,
}

impl TimeSurfaceBuilder {
    pub fn new(width: usize, height: usize, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::param("time-surface decay must be positive"));
        }
        Ok(Self {
            t_last: ImageF::new(width, height, f64::NAN),
            sign: Grid::new(width, height, 0),
            eta,
        })
    }

    pub fn ingest(&mut self, events: &[Event]) {
        for e in events {
            let (x, y) = (e.x as usize, e.y as usize);
            self.t_last.set(x, y, e.t);
            self.sign.set(x, y, e.polarity.sign() as i8);
        }
    }

    pub fn snapshot(&self, t_ref: f64) -> TimeSurface {
        let values = ImageF::from_vec(
            self.t_last.width(),
            self.t_last.height(),
            self.t_last
                .data()
                .iter()
                .zip(self.sign.data())
                .map(|(&t, &s)| {
                    if t.is_nan() {
                        0.0
                    } else {
                        s as f64 * (-(t_ref - t) / self.eta).exp()
                    }
                })
                .collect(),
        );
        TimeSurface {
            values,
            t_last: self.t_last.clone(),
            t_ref,
            eta: self.eta,
        }
    }
}

/// Binary event-accumulation frame over `[t0, t0 + dt]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMat {
    pub values: Grid<u8>,
    pub t0: f64,
    pub dt: f64,
}

impl EventMat {
    pub const ON: u8 = 255;

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn active_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v != 0).count()
    }

    pub fn to_image(&self) -> ImageF {
        self.values.map(|&v| v as f64)
    }

    /// Marks every event of `events` falling in `[t0, t0 + dt]`.
    pub fn from_events(width: usize, height: usize, events: &[Event], t0: f64, dt: f64) -> Self {
        let mut values = Grid::new(width, height, 0u8);
        for e in events.iter().filter(|e| e.t >= t0 && e.t <= t0 + dt) {
            values.set(e.x as usize, e.y as usize, EventMat::ON);
        }
        EventMat { values, t0, dt }
    }
}

pub fn build_event_mat(stream: &EventStream, t0: f64, dt: f64) -> Result<EventMat> {
    if !(dt > 0.0) {
        return Err(Error::param("event-mat window must be positive"));
    }
    Ok(EventMat::from_events(stream.width(), stream.height(), stream.window(t0, t0 + dt), t0, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(events, 8, 6).unwrap()
    }

    #[test]
    fn fresh_event_has_unit_value() {
        let s = stream(vec![Event::new(0.5, 2, 3, Polarity::Positive)]);
        let ts = build_time_surface(&s, 0.5, 0.03).unwrap();
        assert_eq!(ts.values.at(2, 3), 1.0);
        assert_eq!(ts.values.at(0, 0), 0.0);
        assert!(ts.t_last.at(0, 0).is_nan());
    }

    #[test]
    fn decays_by_e_after_one_eta() {
        let s = stream(vec![Event::new(0.5, 2, 3, Polarity::Positive)]);
        let ts = build_time_surface(&s, 0.53, 0.03).unwrap();
        assert!((ts.values.at(2, 3) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((ts.values.at(2, 3) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn later_event_sets_sign_and_decay() {
        let s = stream(vec![
            Event::new(0.1, 4, 4, Polarity::Positive),
            Event::new(0.2, 4, 4, Polarity::Negative),
        ]);
        let ts = build_time_surface(&s, 0.25, 0.05).unwrap();
        assert!((ts.values.at(4, 4) + (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = stream(vec![Event::new(1.0, 0, 0, Polarity::Positive)]);
        assert!(build_time_surface(&s, 1.0, 0.0).is_err());
        assert!(build_time_surface(&s, 0.5, 0.03).is_err());
        assert!(build_event_mat(&s, 0.0, 0.0).is_err());
        assert!(EventStream::new(vec![Event::new(1.0, 9, 0, Polarity::Positive)], 8, 6).is_err());
        assert!(EventStream::new(
            vec![
                Event::new(1.0, 0, 0, Polarity::Positive),
                Event::new(0.9, 0, 0, Polarity::Positive)
            ],
            8,
            6
        )
        .is_err());
    }

    #[test]
    fn event_mat_examples() {
        let empty = build_event_mat(&stream(vec![]), 0.0, 0.01).unwrap();
        assert_eq!(empty.active_count(), 0);

        let s = stream(vec![Event::new(0.005, 3, 4, Polarity::Negative)]);
        let m = build_event_mat(&s, 0.0, 0.01).unwrap();
        assert_eq!(m.active_count(), 1);
        assert_eq!(m.values.at(3, 4), 255);

        let s = stream(vec![Event::new(0.01 + 1e-6, 3, 4, Polarity::Positive)]);
        assert_eq!(build_event_mat(&s, 0.0, 0.01).unwrap().active_count(), 0);
    }

    proptest! {
        #[test]
        fn decay_is_strictly_monotone(dt1 in 0.0f64..0.2, extra in 1e-4f64..0.2) {
            let s = stream(vec![Event::new(0.0, 1, 1, Polarity::Positive)]);
            let a = build_time_surface(&s, dt1, 0.03).unwrap().values.at(1, 1);
            let b = build_time_surface(&s, dt1 + extra, 0.03).unwrap().values.at(1, 1);
            prop_assert!(b < a);
        }

        #[test]
        fn event_mat_is_idempotent_under_duplication(
            raw in prop::collection::vec((0.0f64..1.0, 0u16..8, 0u16..6), 0..50)
        ) {
            let mut events: Vec<Event> = raw.iter().map(|&(t, x, y)| Event::new(t, x, y, Polarity::Positive)).collect();
            events.sort_by(|a, b| a.t.total_cmp(&b.t));
            let mut doubled = Vec::new();
            for e in &events { doubled.push(*e); doubled.push(*e); }
            let a = build_event_mat(&stream(events), 0.2, 0.5).unwrap();
            let b = build_event_mat(&stream(doubled), 0.2, 0.5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
