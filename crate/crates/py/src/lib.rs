//! Python bindings. Reports come back as plain Python objects (dicts,
//! lists, ints) built from the same JSON the CLI emits.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use cachevisor::attacks::{run_aes_extraction, run_integrity_attack, ExtractionConfig};
use cachevisor::dmmu::FaultInjection;
use cachevisor::harness::check_cache_lemmas;
use cachevisor::harness::invariant::check_invariant;
use cachevisor::harness::refcount::check_refcounts;
use cachevisor::harness::traces::{run_trace, Checks, InitialState, OpMix, TraceSpec};
use cachevisor::scenario::demo_spawn;
use cachevisor::{
    AccessPerm, CacheGeometry, Countermeasure, GuestOp, Hypercall, PhysAddr, Rights, SimError, StepResult,
    SystemConfig, VirtAddr,
};

create_exception!(cachevisor_py, SimulatorError, PyException);

fn sim_err(e: SimError) -> PyErr {
    SimulatorError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts the CLI spellings (`none`, `acpt`, `selective`, `flush`,
/// `detect`) and the report spellings (`selective_evict`, ...).
fn countermeasure(name: &str) -> PyResult<Countermeasure> {
    let canonical = match name {
        "selective" => "selective_evict",
        "flush" => "full_flush",
        "detect" => "incoherency_detect",
        other => other,
    };
    serde_json::from_value(serde_json::Value::String(canonical.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown countermeasure {name:?}")))
}

fn config(cm: &str, monitor: bool, seed: u64, geometry: Option<(usize, usize, usize)>) -> PyResult<SystemConfig> {
    let mut cfg = SystemConfig { countermeasure: countermeasure(cm)?, monitor, seed, ..SystemConfig::default() };
    if let Some((sets, ways, line_bytes)) = geometry {
        let indexing = cfg.geometry.indexing;
        cfg.geometry = CacheGeometry::new(sets, ways, line_bytes, indexing).map_err(sim_err)?;
    }
    Ok(cfg)
}

fn rights(ap: u8, cacheable: bool, executable: bool) -> Rights {
    Rights { ap: AccessPerm::from_bits(ap), cacheable, executable }
}

/// A booted machine: guest memory accesses, cache maintenance and the
/// nine hypercalls.
#[pyclass(name = "System")]
pub struct PySystem {
    inner: cachevisor::System,
}

impl PySystem {
    fn step<'py>(&mut self, py: Python<'py>, op: GuestOp) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.step(&op).map_err(sim_err)?;
        to_py(py, &r)
    }

    fn call<'py>(&mut self, py: Python<'py>, call: Hypercall) -> PyResult<Bound<'py, PyAny>> {
        let v = self.inner.hypercall(&call);
        to_py(py, &v)
    }
}

#[pymethods]
impl PySystem {
    #[new]
    #[pyo3(signature = (countermeasure = "none", monitor = false, seed = 0, geometry = None))]
    fn new(countermeasure: &str, monitor: bool, seed: u64, geometry: Option<(usize, usize, usize)>) -> PyResult<Self> {
        let cfg = config(countermeasure, monitor, seed, geometry)?;
        Ok(PySystem { inner: cachevisor::System::boot(&cfg).map_err(sim_err)? })
    }

    /// Guest read; raises on a fault.
    fn read(&mut self, va: u32) -> PyResult<u32> {
        match self.inner.step(&GuestOp::Read { va: VirtAddr(va) }).map_err(sim_err)? {
            StepResult::Value(v) => Ok(v),
            other => Err(SimulatorError::new_err(format!("read {va:#x}: {other:?}"))),
        }
    }

    /// Guest write; raises on a fault.
    fn write(&mut self, va: u32, value: u32) -> PyResult<()> {
        self.inner.write(VirtAddr(va), value).map_err(sim_err)
    }

    fn clean<'py>(&mut self, py: Python<'py>, va: u32) -> PyResult<Bound<'py, PyAny>> {
        self.step(py, GuestOp::Clean { va: VirtAddr(va) })
    }

    fn invalidate<'py>(&mut self, py: Python<'py>, va: u32) -> PyResult<Bound<'py, PyAny>> {
        self.step(py, GuestOp::Invalidate { va: VirtAddr(va) })
    }

    fn switch<'py>(&mut self, py: Python<'py>, bl: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::Switch { bl })
    }

    fn create_l1<'py>(&mut self, py: Python<'py>, bl: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::CreateL1 { bl })
    }

    fn create_l2<'py>(&mut self, py: Python<'py>, bl: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::CreateL2 { bl })
    }

    fn free_l1<'py>(&mut self, py: Python<'py>, bl: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::FreeL1 { bl })
    }

    fn free_l2<'py>(&mut self, py: Python<'py>, bl: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::FreeL2 { bl })
    }

    #[pyo3(signature = (bl, idx, target, ap = 3, cacheable = true, executable = false))]
    #[allow(clippy::too_many_arguments)]
    fn map_l1<'py>(
        &mut self,
        py: Python<'py>,
        bl: u32,
        idx: u32,
        target: u32,
        ap: u8,
        cacheable: bool,
        executable: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::MapL1 { bl, idx, target, rights: rights(ap, cacheable, executable) })
    }

    #[pyo3(signature = (bl, idx, target, ap = 3, cacheable = true, executable = false))]
    #[allow(clippy::too_many_arguments)]
    fn map_l2<'py>(
        &mut self,
        py: Python<'py>,
        bl: u32,
        idx: u32,
        target: u32,
        ap: u8,
        cacheable: bool,
        executable: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::MapL2 { bl, idx, target, rights: rights(ap, cacheable, executable) })
    }

    fn unmap_l1<'py>(&mut self, py: Python<'py>, bl: u32, idx: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::UnmapL1 { bl, idx })
    }

    fn unmap_l2<'py>(&mut self, py: Python<'py>, bl: u32, idx: u32) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::UnmapL2 { bl, idx })
    }

    #[pyo3(signature = (bl, idx, l2_bl, l2_slot = 0))]
    fn link_l1<'py>(
        &mut self,
        py: Python<'py>,
        bl: u32,
        idx: u32,
        l2_bl: u32,
        l2_slot: u32,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.call(py, Hypercall::LinkL1 { bl, idx, l2_bl, l2_slot })
    }

    /// What the core reads at `pa`: the cached word on a hit.
    fn core_view(&self, pa: u32) -> PyResult<u32> {
        self.inner.machine.core_view(PhysAddr(pa)).map_err(sim_err)
    }

    /// What memory would hold after evicting `pa`'s line.
    fn memory_view(&self, pa: u32) -> PyResult<u32> {
        self.inner.machine.memory_view(PhysAddr(pa)).map_err(sim_err)
    }

    fn coherent(&self, pa: u32) -> bool {
        self.inner.machine.coherent([PhysAddr(pa)])
    }

    /// `None` when the invariant holds, otherwise the first violation.
    fn check_invariant<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        check_invariant(&self.inner).err().map(|v| to_py(py, &v)).transpose()
    }

    /// Code integrity against the golden image; `None` without the monitor.
    fn integrity(&self) -> Option<bool> {
        self.inner.integrity()
    }

    #[getter]
    fn ttbr0(&self) -> u32 {
        self.inner.machine.coregs.ttbr0.0
    }

    #[getter]
    fn page_type(&self) -> Vec<String> {
        self.inner.hyp.pgtype.iter().map(|t| format!("{t:?}")).collect()
    }

    fn refs<'py>(&self, py: Python<'py>, block: usize) -> PyResult<Bound<'py, PyAny>> {
        let r = self.inner.hyp.refs.get(block).ok_or_else(|| PyValueError::new_err("block out of range"))?;
        to_py(py, r)
    }
}

#[pyfunction]
#[pyo3(signature = (countermeasure = "none", seed = 0))]
fn integrity_attack<'py>(py: Python<'py>, countermeasure: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(countermeasure, false, seed, None)?;
    to_py(py, &run_integrity_attack(&cfg).map_err(sim_err)?)
}

#[pyfunction]
#[pyo3(signature = (key, countermeasure = "none", seed = 0, max_encryptions = 20_000))]
fn aes_extract<'py>(
    py: Python<'py>,
    key: [u8; 16],
    countermeasure: &str,
    seed: u64,
    max_encryptions: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(countermeasure, false, seed, None)?;
    let ex = ExtractionConfig { max_encryptions, ..ExtractionConfig::default() };
    to_py(py, &run_aes_extraction(&cfg, &key, &ex).map_err(sim_err)?)
}

/// Random trace with derivability, MMU-integrity, secure-observation and
/// invariant checks.
#[pyfunction]
#[pyo3(signature = (seed, steps = 2000, countermeasure = "none"))]
fn check_trace<'py>(py: Python<'py>, seed: u64, steps: usize, countermeasure: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(countermeasure, false, seed, None)?;
    let spec = TraceSpec { seed, steps, mix: OpMix::for_countermeasure(cfg.countermeasure), init: InitialState::Boot };
    to_py(py, &run_trace(&cfg, &spec, &Checks::all()).map_err(sim_err)?)
}

#[pyfunction]
#[pyo3(signature = (seed, steps = 2000, countermeasure = "acpt", skip_link_refcount = false))]
fn check_refs<'py>(
    py: Python<'py>,
    seed: u64,
    steps: usize,
    countermeasure: &str,
    skip_link_refcount: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(countermeasure, false, seed, None)?;
    let mix = match cfg.countermeasure {
        Countermeasure::None => OpMix::hypercall_heavy().cacheable_only(),
        _ => OpMix::hypercall_heavy(),
    };
    let spec = TraceSpec { seed, steps, mix, init: InitialState::Boot };
    let r = check_refcounts(&cfg, &spec, FaultInjection { skip_link_refcount }).map_err(sim_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (seed, histories = 1000))]
fn cache_lemmas<'py>(py: Python<'py>, seed: u64, histories: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &check_cache_lemmas(seed, histories))
}

#[pyfunction]
#[pyo3(signature = (countermeasure = "none", table = 264))]
fn spawn<'py>(py: Python<'py>, countermeasure: &str, table: u32) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(countermeasure, false, 0, None)?;
    to_py(py, &demo_spawn(&cfg, table).map_err(sim_err)?)
}

#[pymodule]
fn cachevisor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SimulatorError", m.py().get_type::<SimulatorError>())?;
    m.add_class::<PySystem>()?;
    m.add_function(wrap_pyfunction!(integrity_attack, m)?)?;
    m.add_function(wrap_pyfunction!(aes_extract, m)?)?;
    m.add_function(wrap_pyfunction!(check_trace, m)?)?;
    m.add_function(wrap_pyfunction!(check_refs, m)?)?;
    m.add_function(wrap_pyfunction!(cache_lemmas, m)?)?;
    m.add_function(wrap_pyfunction!(spawn, m)?)?;
    Ok(())
}
