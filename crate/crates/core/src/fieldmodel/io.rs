//! Coil-set JSON and field-sample CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{DipoleSourceSet, FieldError, FieldSample};

const SAMPLE_HEADER: [&str; 8] = ["x", "y", "z", "coil_index", "current", "Bx", "By", "Bz"];

impl DipoleSourceSet {
    pub fn from_json_str(text: &str) -> Result<Self, FieldError> {
        let set: Self = serde_json::from_str(text).map_err(|e| FieldError::Parse(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("coil set serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FieldError> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(self.to_json_string().as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

/// Reads `x,y,z,coil_index,current,Bx,By,Bz` rows. A header row is optional.
pub fn read_field_samples(reader: impl Read) -> Result<Vec<FieldSample>, FieldError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(BufReader::new(reader));
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FieldError::Parse(e.to_string()))?;
        if row == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != SAMPLE_HEADER.len() {
            return Err(FieldError::Parse(format!(
                "row {}: expected {} fields, found {}",
                row + 1,
                SAMPLE_HEADER.len(),
                rec.len()
            )));
        }
        let num = |i: usize| -> Result<f64, FieldError> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| FieldError::Parse(format!("row {}: bad {} value {:?}", row + 1, SAMPLE_HEADER[i], &rec[i])))
        };
        let coil_index = rec[3]
            .parse::<usize>()
            .map_err(|_| FieldError::Parse(format!("row {}: bad coil_index {:?}", row + 1, &rec[3])))?;
        let current = num(4)?;
        if current == 0.0 {
            return Err(FieldError::InvalidSample {
                index: out.len(),
                reason: "current must be non-zero".into(),
            });
        }
        out.push(FieldSample {
            point: Vector3::new(num(0)?, num(1)?, num(2)?),
            coil_index,
            current,
            measured_field: Vector3::new(num(5)?, num(6)?, num(7)?),
        });
    }
    Ok(out)
}

pub fn write_field_samples(writer: impl Write, samples: &[FieldSample]) -> Result<(), FieldError> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| FieldError::Parse(e.to_string());
    w.write_record(SAMPLE_HEADER).map_err(csv_err)?;
    for s in samples {
        w.write_record([
            s.point.x.to_string(),
            s.point.y.to_string(),
            s.point.z.to_string(),
            s.coil_index.to_string(),
            s.current.to_string(),
            s.measured_field.x.to_string(),
            s.measured_field.y.to_string(),
            s.measured_field.z.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
