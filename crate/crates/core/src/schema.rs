//! Fixed-layout payload schemas and the values that conform to them.
//!
//! A [`SchemaDescriptor`] is inferred once from an example payload and then
//! fixes the dtype and shape of every field. Because shapes never change the
//! packed byte size of a payload is known up front, which is what lets ring
//! buffer slots and request queue cells be fixed-size.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::time::Timestamp;

/// Default byte budget for strings inferred from an example.
pub const DEFAULT_TEXT_BYTES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DType {
    F64,
    I64,
    U8,
    Utf8,
}

impl DType {
    /// Size of one element in bytes. Strings are sized per field.
    pub fn elem_size(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
            DType::Utf8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::I64 => "i64",
            DType::U8 => "u8",
            DType::Utf8 => "utf8",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One named, fixed-shape field.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Field {
    pub name: String,
    pub dtype: DType,
    /// Dimensions; empty for scalars and strings.
    pub shape: Vec<usize>,
    /// Maximum encoded byte length, strings only.
    #[cfg_attr(feature = "serde", serde(default))]
    pub max_bytes: usize,
}

impl Field {
    pub fn new(name: impl Into<String>, dtype: DType, shape: &[usize]) -> Self {
        Field {
            name: name.into(),
            dtype,
            shape: shape.to_vec(),
            max_bytes: 0,
        }
    }

    pub fn text(name: impl Into<String>, max_bytes: usize) -> Self {
        Field {
            name: name.into(),
            dtype: DType::Utf8,
            shape: Vec::new(),
            max_bytes,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    /// Packed size of this field. Strings carry a u32 length prefix followed
    /// by `max_bytes` of zero-padded storage.
    pub fn byte_size(&self) -> usize {
        match self.dtype {
            DType::Utf8 => 4 + self.max_bytes,
            d => d.elem_size() * self.element_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("example payload has no fields")]
    EmptyExample,
    #[error("unsupported value for field `{0}`: {1}")]
    UnsupportedValue(String, String),
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("payload does not match schema: {0}")]
    SchemaMismatch(String),
}

/// Ordered (lexicographic by name) list of fixed-shape fields.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SchemaDescriptor {
    fields: Vec<Field>,
}

impl SchemaDescriptor {
    /// Builds a descriptor, sorting fields by name and rejecting duplicates.
    pub fn new(mut fields: Vec<Field>) -> Result<Self, SchemaError> {
        fields.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in fields.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(SchemaError::DuplicateField(pair[0].name.clone()));
            }
        }
        Ok(SchemaDescriptor { fields })
    }

    /// Schema with no fields, used for argument-less API methods.
    pub fn empty() -> Self {
        SchemaDescriptor { fields: Vec::new() }
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields
            .binary_search_by(|f| f.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.fields[i])
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Packed payload size in bytes, computable from the descriptor alone.
    pub fn payload_size(&self) -> usize {
        self.fields.iter().map(Field::byte_size).sum()
    }

    /// Stable 64-bit FNV-1a hash of the canonical field listing.
    pub fn hash64(&self) -> u64 {
        let mut h = Fnv64::new();
        for f in &self.fields {
            h.write(f.name.as_bytes());
            h.write(b":");
            h.write(f.dtype.name().as_bytes());
            for d in &f.shape {
                h.write(&(*d as u64).to_le_bytes());
            }
            h.write(&(f.max_bytes as u64).to_le_bytes());
            h.write(b";");
        }
        h.finish()
    }

    /// Returns a descriptor restricted to the fields accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Field) -> bool) -> SchemaDescriptor {
        SchemaDescriptor {
            fields: self.fields.iter().filter(|f| keep(f)).cloned().collect(),
        }
    }

    /// Checks that `payload` has exactly this schema's keys and that every
    /// value matches its field's dtype and shape.
    pub fn check(&self, payload: &Payload) -> Result<(), SchemaError> {
        if payload.len() != self.fields.len() {
            let missing: Vec<&str> = self
                .fields
                .iter()
                .filter(|f| !payload.contains_key(&f.name))
                .map(|f| f.name.as_str())
                .collect();
            let extra: Vec<&str> = payload
                .keys()
                .filter(|k| self.field(k).is_none())
                .map(String::as_str)
                .collect();
            return Err(SchemaError::SchemaMismatch(format!(
                "missing {:?}, unexpected {:?}",
                missing, extra
            )));
        }
        for f in &self.fields {
            let v = payload.get(&f.name).ok_or_else(|| {
                SchemaError::SchemaMismatch(format!("missing field `{}`", f.name))
            })?;
            v.check_against(f)?;
        }
        Ok(())
    }
}

impl fmt::Display for SchemaDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, field) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}: {}{:?}", field.name, field.dtype, field.shape)?;
            if field.dtype == DType::Utf8 {
                write!(f, "<{}>", field.max_bytes)?;
            }
        }
        f.write_str("}")
    }
}

/// A field value: a fixed-shape numeric array or a string.
///
/// Scalars are arrays with an empty shape.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Value {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
    Text(String),
}

impl Value {
    pub fn f64(x: f64) -> Self {
        Value::F64 {
            shape: Vec::new(),
            data: alloc::vec![x],
        }
    }

    pub fn f64s(data: Vec<f64>) -> Self {
        Value::F64 {
            shape: alloc::vec![data.len()],
            data,
        }
    }

    pub fn f64_array(shape: &[usize], data: Vec<f64>) -> Self {
        Value::F64 {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn i64(x: i64) -> Self {
        Value::I64 {
            shape: Vec::new(),
            data: alloc::vec![x],
        }
    }

    pub fn i64s(data: Vec<i64>) -> Self {
        Value::I64 {
            shape: alloc::vec![data.len()],
            data,
        }
    }

    pub fn u8_array(shape: &[usize], data: Vec<u8>) -> Self {
        Value::U8 {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn dtype(&self) -> DType {
        match self {
            Value::F64 { .. } => DType::F64,
            Value::I64 { .. } => DType::I64,
            Value::U8 { .. } => DType::U8,
            Value::Text(_) => DType::Utf8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Value::F64 { shape, .. } | Value::I64 { shape, .. } | Value::U8 { shape, .. } => shape,
            Value::Text(_) => &[],
        }
    }

    fn data_len(&self) -> usize {
        match self {
            Value::F64 { data, .. } => data.len(),
            Value::I64 { data, .. } => data.len(),
            Value::U8 { data, .. } => data.len(),
            Value::Text(s) => s.len(),
        }
    }

    pub fn as_f64s(&self) -> Option<&[f64]> {
        match self {
            Value::F64 { data, .. } => Some(data),
            _ => None,
        }
    }

    /// First element of an f64 array, or the scalar itself.
    pub fn as_f64(&self) -> Option<f64> {
        self.as_f64s().and_then(|d| d.first().copied())
    }

    pub fn as_i64s(&self) -> Option<&[i64]> {
        match self {
            Value::I64 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        self.as_i64s().and_then(|d| d.first().copied())
    }

    pub fn as_u8s(&self) -> Option<&[u8]> {
        match self {
            Value::U8 { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Bitwise equality (NaN payloads compare by bit pattern).
    pub fn bit_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::F64 { shape: s1, data: d1 }, Value::F64 { shape: s2, data: d2 }) => {
                s1 == s2
                    && d1.len() == d2.len()
                    && d1.iter().zip(d2).all(|(a, b)| a.to_bits() == b.to_bits())
            }
            _ => self == other,
        }
    }

    fn check_against(&self, f: &Field) -> Result<(), SchemaError> {
        if self.dtype() != f.dtype {
            return Err(SchemaError::SchemaMismatch(format!(
                "field `{}` expects {}, got {}",
                f.name,
                f.dtype,
                self.dtype()
            )));
        }
        match self {
            Value::Text(s) => {
                if s.len() > f.max_bytes {
                    return Err(SchemaError::SchemaMismatch(format!(
                        "field `{}` string of {} bytes exceeds {}",
                        f.name,
                        s.len(),
                        f.max_bytes
                    )));
                }
            }
            _ => {
                if self.shape() != f.shape.as_slice() || self.data_len() != f.element_count() {
                    return Err(SchemaError::SchemaMismatch(format!(
                        "field `{}` expects shape {:?}, got {:?} with {} elements",
                        f.name,
                        f.shape,
                        self.shape(),
                        self.data_len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Field name → value. `BTreeMap` keeps keys in the same lexicographic
/// order as [`SchemaDescriptor`].
pub type Payload = BTreeMap<String, Value>;

/// Bitwise payload equality.
pub fn payload_bit_eq(a: &Payload, b: &Payload) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
}

/// Infers a descriptor from an example payload.
///
/// Numeric values keep their shape; strings get a byte budget of at least
/// [`DEFAULT_TEXT_BYTES`] (or the example's length rounded up to 8).
pub fn infer_schema(example: &Payload) -> Result<SchemaDescriptor, SchemaError> {
    if example.is_empty() {
        return Err(SchemaError::EmptyExample);
    }
    let mut fields = Vec::with_capacity(example.len());
    for (name, value) in example {
        let field = match value {
            Value::Text(s) => Field::text(name.clone(), DEFAULT_TEXT_BYTES.max(s.len().div_ceil(8) * 8)),
            v => {
                let expected: usize = v.shape().iter().product();
                if expected != v.data_len() {
                    return Err(SchemaError::UnsupportedValue(
                        name.clone(),
                        format!(
                            "shape {:?} implies {} elements but {} were given",
                            v.shape(),
                            expected,
                            v.data_len()
                        ),
                    ));
                }
                Field::new(name.clone(), v.dtype(), v.shape())
            }
        };
        fields.push(field);
    }
    SchemaDescriptor::new(fields)
}

/// A timestamped payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedSample {
    pub ts: Timestamp,
    pub payload: Payload,
}

impl TimedSample {
    pub fn new(ts: Timestamp, payload: Payload) -> Self {
        TimedSample { ts, payload }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.payload.get(key)
    }
}

/// Small helper for building payloads in code and tests.
pub fn payload<I, K>(entries: I) -> Payload
where
    I: IntoIterator<Item = (K, Value)>,
    K: ToString,
{
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub(crate) struct Fnv64(u64);

impl Fnv64 {
    pub(crate) fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
