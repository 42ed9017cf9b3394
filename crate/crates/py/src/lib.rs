use pyo3::prelude::*;

#[pymodule]
fn fedpatch_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
