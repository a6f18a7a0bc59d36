//! Serde helpers storing matrices as nested JSON arrays.

use ndarray::Array2;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub(crate) fn to_rows<T: Copy>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub(crate) fn from_rows<T: Copy>(rows: Vec<Vec<T>>) -> Result<Array2<T>, String> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err("ragged matrix rows".into());
    }
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| e.to_string())
}

pub(crate) fn serialize<S, T>(m: &Array2<T>, s: S) -> Result<S::Ok, S::Error>
where
    S: Serializer,
    T: Copy + Serialize,
{
    to_rows(m).serialize(s)
}

pub(crate) fn deserialize<'de, D, T>(d: D) -> Result<Array2<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Copy + Deserialize<'de>,
{
    let rows = Vec::<Vec<T>>::deserialize(d)?;
    from_rows(rows).map_err(D::Error::custom)
}

pub(crate) mod option {
    use super::*;

    pub(crate) fn serialize<S, T>(m: &Option<Array2<T>>, s: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        T: Copy + Serialize,
    {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub(crate) fn deserialize<'de, D, T>(d: D) -> Result<Option<Array2<T>>, D::Error>
    where
        D: Deserializer<'de>,
        T: Copy + Deserialize<'de>,
    {
        match Option::<Vec<Vec<T>>>::deserialize(d)? {
            Some(rows) => from_rows(rows).map(Some).map_err(D::Error::custom),
            None => Ok(None),
        }
    }
}
