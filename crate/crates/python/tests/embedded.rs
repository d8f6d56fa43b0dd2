use pyo3::prelude::*;
use pyo3::types::PyDict;

use inclusionkit_py::inclusionkit_py;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    pyo3::append_to_inittab!(inclusionkit_py);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("ik", py.import("inclusionkit_py").unwrap()).unwrap();
        f(py, &globals);
    });
}

#[test]
fn bindings_from_python() {
    with_module(|py, g| {
        let eval = |src: &str| py.eval(&std::ffi::CString::new(src).unwrap(), Some(g), None).unwrap();
        let (mu, lip): (f64, f64) = eval("ik.spectral_bounds([[2.0, 1.0], [-1.0, 2.0]])").extract().unwrap();
        assert!((mu - 2.0).abs() < 1e-12 && (lip - 5f64.sqrt()).abs() < 1e-12);
        let n: u64 = eval("ik.iteration_bound_coupled(3.5, 0.75, 2.0, 0.3, 1e-4)").extract().unwrap();
        assert_eq!(n, 42);
        let verdict: String = eval("ik.run_preset('coupled-svi').verdict").extract().unwrap();
        assert_eq!(verdict, "converged");
        let err = py.eval(c"ik.Schedule.constant(-1.0)", Some(g), None).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
    });
}
