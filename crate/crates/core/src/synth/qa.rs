use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{rng, RenderedScene, SceneKind};
use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Count,
    /// "There are K objects" yes/no verification.
    Verify(usize),
    Color,
    Shape,
}

/// A question about a scene. Only `answer` tokens carry loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub id: String,
    pub scene_id: String,
    pub task: Task,
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl QARecord {
    pub fn new(scene: &RenderedScene, task: Task) -> Result<Self> {
        let vocab = Vocab;
        let (prompt, answer) = match task {
            Task::Count => {
                let answer = vocab.digit(scene.count).ok_or_else(|| {
                    Error::Config(format!("count {} has no answer token", scene.count))
                })?;
                let text = format!(
                    "what is the number of the {} in the image ? answer with the number only",
                    scene.kind.object_phrase()
                );
                (text, answer)
            }
            Task::Verify(k) => {
                let digit = vocab
                    .digit(k)
                    .ok_or_else(|| Error::Config(format!("probe quantity {k} has no token")))?;
                let text = format!(
                    "there are {} {} in the image , yes or no ?",
                    vocab.token(digit),
                    scene.kind.object_phrase()
                );
                let answer = if k == scene.count { vocab.yes() } else { vocab.no() };
                (text, answer)
            }
            Task::Color | Task::Shape => {
                if scene.count != 1 {
                    return Err(Error::Contract(format!(
                        "{task:?} questions need a single-object scene, got {} objects",
                        scene.count
                    )));
                }
                let a = scene.attributes[0];
                if task == Task::Color {
                    let text = format!(
                        "what is the color of the {} in the image ? answer with the color name only",
                        a.shape.name()
                    );
                    (text, vocab.expect(a.color.name()))
                } else {
                    let text = format!(
                        "what is the shape of the {} object in the image ? answer with the shape name only",
                        a.color.name()
                    );
                    (text, vocab.expect(a.shape.name()))
                }
            }
        };
        let prompt = vocab.encode(&prompt).expect("templates only use vocabulary words");
        let tag = match task {
            Task::Count => "count".to_string(),
            Task::Verify(k) => format!("verify{k}"),
            Task::Color => "color".into(),
            Task::Shape => "shape".into(),
        };
        Ok(Self {
            id: format!("{}_{tag}", scene.id),
            scene_id: scene.id.clone(),
            task,
            prompt,
            answer: vec![answer],
        })
    }
}

/// Relative weights of the counting and verification questions attached to
/// counting scenes. Colour/shape questions come from their own scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub count: f64,
    pub verify: f64,
    /// Largest probed quantity for verification questions.
    pub verify_max: usize,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { count: 70.0, verify: 10.0, verify_max: 9 }
    }
}

/// One counting record per scene, plus a verification record for a
/// `verify / count` fraction of scenes. Half the verification probes ask
/// about the true count; the rest use a different quantity.
pub fn build_records(scenes: &[RenderedScene], mix: TaskMix, seed: u64) -> Result<Vec<QARecord>> {
    let mut rng = rng(seed);
    let p_verify = if mix.count > 0.0 { (mix.verify / mix.count).min(1.0) } else { 0.0 };
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        if scene.kind == SceneKind::ColorShape {
            return Err(Error::Config("counting mix applies to counting scenes".into()));
        }
        out.push(QARecord::new(scene, Task::Count)?);
        if rng.random_bool(p_verify) {
            let k = if rng.random_bool(0.5) || mix.verify_max == 0 {
                scene.count
            } else {
                let mut k = rng.random_range(0..mix.verify_max);
                if k >= scene.count {
                    k += 1;
                }
                k
            };
            out.push(QARecord::new(scene, Task::Verify(k))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_syndot, CanvasSpec};

    #[test]
    fn count_prompt_and_answer() {
        let s = gen_syndot(CanvasSpec::toy(), 4, 2, 1).unwrap();
        let r = QARecord::new(&s, Task::Count).unwrap();
        let v = Vocab;
        assert_eq!(
            v.decode(&r.prompt),
            "what is the number of the black dots in the image ? answer with the number only"
        );
        assert_eq!(r.answer, vec![v.digit(4).unwrap()]);
    }

    #[test]
    fn verify_answer_consistent_with_count() {
        let s = gen_syndot(CanvasSpec::toy(), 4, 2, 1).unwrap();
        for k in 0..=9 {
            let r = QARecord::new(&s, Task::Verify(k)).unwrap();
            let want = if k == 4 { Vocab.yes() } else { Vocab.no() };
            assert_eq!(r.answer, vec![want]);
        }
    }

    #[test]
    fn mix_ratio() {
        let spec = CanvasSpec::toy();
        let scenes: Vec<_> = (0..700).map(|i| gen_syndot(spec, 1 + i % 5, 2, i as u64).unwrap()).collect();
        let recs = build_records(&scenes, TaskMix::default(), 3).unwrap();
        let verify = recs.iter().filter(|r| matches!(r.task, Task::Verify(_))).count();
        // binomial(700, 1/7): mean 100, sd ~9.3
        assert!((70..130).contains(&verify), "{verify}");
        for r in &recs {
            if let Task::Verify(k) = r.task {
                assert!(k <= 9);
            }
        }
    }
}
