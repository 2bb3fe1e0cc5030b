//! Single-worker inference queue over an immutable model snapshot.

use std::collections::VecDeque;
use std::sync::{mpsc, Arc};
use std::thread;

use ndarray::Array3;
use tokio::sync::oneshot;

use longitrack_core::net::{predict_lesion_from, prompt_block, Model, Tensor};
use longitrack_core::{LongitudinalCase, PromptPoint, VoiWindow};

/// Baseline encodings kept by the worker. One entry of the default model is
/// about 22 MB.
pub const BASELINE_CACHE_ENTRIES: usize = 4;

pub struct Prediction {
    pub mask: Array3<bool>,
    pub window: VoiWindow,
}

enum Job {
    Encode {
        case: Arc<LongitudinalCase>,
        p0: PromptPoint,
        reply: mpsc::Sender<longitrack_core::Result<()>>,
    },
    Predict {
        case: Arc<LongitudinalCase>,
        p0: PromptPoint,
        pt: PromptPoint,
        reply: oneshot::Sender<longitrack_core::Result<Prediction>>,
    },
}

type Features = Arc<Option<Vec<Tensor>>>;

struct BaselineCache {
    entries: VecDeque<((String, PromptPoint), Features)>,
}

impl BaselineCache {
    fn get(&mut self, model: &Model, case: &LongitudinalCase, p0: &PromptPoint) -> longitrack_core::Result<Features> {
        let key = (case.case_id.clone(), *p0);
        if let Some(i) = self.entries.iter().position(|(k, _)| *k == key) {
            let hit = self.entries.remove(i).expect("index in range");
            self.entries.push_back(hit);
        } else {
            let (x0, _) = prompt_block(model, &case.baseline.volume, p0)?;
            let f0 = Arc::new(model.baseline_features(&x0)?);
            if self.entries.len() == BASELINE_CACHE_ENTRIES {
                self.entries.pop_front();
            }
            self.entries.push_back((key, f0));
        }
        Ok(Arc::clone(&self.entries.back().expect("just pushed").1))
    }
}

#[derive(Clone)]
pub struct InferenceQueue {
    tx: mpsc::Sender<Job>,
    model: Arc<Model>,
}

impl InferenceQueue {
    pub fn start(model: Model) -> Self {
        let model = Arc::new(model);
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = Arc::clone(&model);
        thread::Builder::new()
            .name("inference".into())
            .spawn(move || {
                let mut cache = BaselineCache { entries: VecDeque::new() };
                for job in rx {
                    match job {
                        Job::Encode { case, p0, reply } => {
                            let _ = reply.send(cache.get(&worker, &case, &p0).map(|_| ()));
                        }
                        Job::Predict { case, p0, pt, reply } => {
                            let out = cache.get(&worker, &case, &p0).and_then(|f0| {
                                predict_lesion_from(&worker, f0.as_deref(), &case.followup.volume, &pt)
                                    .map(|p| Prediction { mask: p.full_mask(case.shape(), 0.5), window: p.window })
                            });
                            let _ = reply.send(out);
                        }
                    }
                }
            })
            .expect("spawn inference worker");
        Self { tx, model }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Encodes the baseline VOI around `p0` ahead of a verify. Blocks the
    /// calling thread until the worker has done so.
    pub fn prepare_blocking(&self, case: Arc<LongitudinalCase>, p0: PromptPoint) -> Option<longitrack_core::Result<()>> {
        let (reply, rx) = mpsc::channel();
        self.tx.send(Job::Encode { case, p0, reply }).ok()?;
        rx.recv().ok()
    }

    /// Queues one request and waits for its turn.
    pub async fn predict(&self, case: Arc<LongitudinalCase>, p0: PromptPoint, pt: PromptPoint) -> Option<longitrack_core::Result<Prediction>> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Job::Predict { case, p0, pt, reply }).ok()?;
        rx.await.ok()
    }
}
