//! Routing-event CSV log.
//!
//! Header `step,layer,token_index,modality,selected_indices,weights`, one row
//! per routed token. `modality` is the 0/1 indicator; the two list columns
//! are `;`-separated and aligned.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::stream::Modality;

pub const HEADER: [&str; 6] = [
    "step",
    "layer",
    "token_index",
    "modality",
    "selected_indices",
    "weights",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingEvent {
    pub step: u64,
    pub layer: usize,
    pub token_index: usize,
    pub modality: Modality,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub fn write_events<W: Write>(out: W, events: &[RoutingEvent], with_header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if with_header {
        w.write_record(HEADER)?;
    }
    for e in events {
        w.write_record([
            e.step.to_string(),
            e.layer.to_string(),
            e.token_index.to_string(),
            e.modality.indicator().to_string(),
            join(&e.selected),
            join(&e.weights),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<routing events>", e))?;
    Ok(())
}

/// Streaming reader; each item reports malformed rows with their line number.
pub struct EventReader<R: Read> {
    inner: csv::Reader<R>,
    record: csv::StringRecord,
}

impl<R: Read> EventReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut inner = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(input);
        let header = inner.headers()?.clone();
        if !header.is_empty() && header.iter().ne(HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}, got {:?}", HEADER.join(","), header),
            });
        }
        Ok(Self {
            inner,
            record: csv::StringRecord::new(),
        })
    }

    fn parse(&self) -> Result<RoutingEvent> {
        let line = self.record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if self.record.len() != HEADER.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                HEADER.len(),
                self.record.len()
            )));
        }
        let f = |i: usize| self.record.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<u64> {
            f(i).parse()
                .map_err(|_| bad(format!("{} `{}` is not an integer", HEADER[i], f(i))))
        };
        let list = |i: usize| -> Vec<&str> {
            if f(i).is_empty() {
                Vec::new()
            } else {
                f(i).split(';').collect()
            }
        };
        let indicator: u8 = f(3)
            .parse()
            .map_err(|_| bad(format!("modality `{}` is not 0 or 1", f(3))))?;
        let modality = Modality::from_indicator(indicator).map_err(|e| bad(e.to_string()))?;
        let selected = list(4)
            .into_iter()
            .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad expert index `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let weights = list(5)
            .into_iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad weight `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if selected.len() != weights.len() || selected.is_empty() {
            return Err(bad(format!(
                "{} selected indices with {} weights",
                selected.len(),
                weights.len()
            )));
        }
        Ok(RoutingEvent {
            step: num(0)?,
            layer: num(1)? as usize,
            token_index: num(2)? as usize,
            modality,
            selected,
            weights,
        })
    }
}

impl<R: Read> Iterator for EventReader<R> {
    type Item = Result<RoutingEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.inner.read_record(&mut self.record) {
            Ok(true) => Some(self.parse()),
            Ok(false) => None,
            Err(e) => Some(Err(e.into())),
        }
    }
}

pub fn read_events<R: Read>(input: R) -> Result<Vec<RoutingEvent>> {
    EventReader::new(input)?.collect()
}
