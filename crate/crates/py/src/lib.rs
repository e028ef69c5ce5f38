use pyo3::prelude::*;

#[pymodule]
fn demosel_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
