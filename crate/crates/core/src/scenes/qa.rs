//! Question/answer templates. Every answer is a deterministic function of
//! the referenced view only.

use super::render::render_views;
use super::{generate_scene, Camera, Category, Lcg64, Motion, ObjectKind, Scene, SceneSample};

pub const NUM_TEMPLATES: usize = 3;
pub const TEMPLATE_WEIGHTS: [u32; NUM_TEMPLATES] = [2, 1, 1];
const QA_SALT: u64 = 0x5bd1_e995_9e37_79b9;
const COUNT_WORDS: [&str; 5] = ["no", "one", "two", "three", "four"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub category: Category,
}

pub fn template_category(template_id: usize) -> Category {
    match template_id {
        0 => Category::Perception,
        1 => Category::Planning,
        _ => Category::Prediction,
    }
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn perception(scene: &Scene, cam: Camera) -> QaPair {
    let pos = cam.phrase();
    let view = scene.view(cam);
    let counts: Vec<(ObjectKind, usize)> = ObjectKind::ALL
        .iter()
        .map(|&k| (k, view.iter().filter(|o| o.kind == k).count()))
        .filter(|&(_, n)| n > 0)
        .collect();
    let answer = if counts.is_empty() {
        format!("there are no important objects to the {pos}.")
    } else {
        let items: Vec<String> = counts
            .iter()
            .map(|&(k, n)| format!("{} {}", COUNT_WORDS[n], k.noun(n > 1)))
            .collect();
        let verb = if counts[0].1 == 1 { "is" } else { "are" };
        format!("there {verb} {} to the {pos}.", join_list(&items))
    };
    QaPair {
        question: format!("what are the important objects to the {pos}?"),
        answer,
        category: Category::Perception,
    }
}

/// In priority order.
const PLANNING_ANSWERS: [&str; 5] = [
    "the ego vehicle should brake.",
    "the ego vehicle should yield to the pedestrian.",
    "the ego vehicle should steer around the obstacle.",
    "the ego vehicle should keep a safe distance.",
    "the ego vehicle can keep going.",
];

fn pedestrian_answer(m: Motion) -> &'static str {
    match m {
        Motion::Stopped => "the pedestrian is standing still.",
        Motion::MovingLeft => "the pedestrian is moving to the left.",
        Motion::MovingRight => "the pedestrian is moving to the right.",
        Motion::Approaching => "the pedestrian is approaching the ego vehicle.",
    }
}

fn planning(scene: &Scene, cam: Camera) -> QaPair {
    let view = scene.view(cam);
    let any = |f: &dyn Fn(&super::SceneObject) -> bool| view.iter().any(f);
    let answer = if any(&|o| o.motion == Motion::Approaching) {
        PLANNING_ANSWERS[0]
    } else if any(&|o| o.kind == ObjectKind::Pedestrian) {
        PLANNING_ANSWERS[1]
    } else if any(&|o| o.kind.is_static()) {
        PLANNING_ANSWERS[2]
    } else if any(&|o| o.motion != Motion::Stopped) {
        PLANNING_ANSWERS[3]
    } else {
        PLANNING_ANSWERS[4]
    };
    QaPair {
        question: format!("what should the ego vehicle do about the {}?", cam.phrase()),
        answer: answer.to_string(),
        category: Category::Planning,
    }
}

fn prediction(scene: &Scene, cam: Camera) -> Option<QaPair> {
    let mut peds = scene.view(cam).iter().filter(|o| o.kind == ObjectKind::Pedestrian);
    let ped = peds.next()?;
    if peds.next().is_some() {
        return None;
    }
    let answer = pedestrian_answer(ped.motion);
    Some(QaPair {
        question: format!("what is the pedestrian to the {} doing?", cam.phrase()),
        answer: answer.to_string(),
        category: Category::Prediction,
    })
}

/// Applies template `template_id` to the view `cam`. Returns `None` when
/// the template does not apply (prediction needs exactly one pedestrian).
pub fn make_qa(scene: &Scene, cam: Camera, template_id: usize) -> Option<QaPair> {
    match template_id {
        0 => Some(perception(scene, cam)),
        1 => Some(planning(scene, cam)),
        2 => prediction(scene, cam),
        _ => None,
    }
}

/// Picks the view and template for a sample. Prediction questions target a
/// view holding exactly one pedestrian; scenes without one fall back to
/// perception.
pub fn choose_question(scene: &Scene) -> (Camera, usize) {
    let mut rng = Lcg64::new(scene.seed.rotate_left(32) ^ QA_SALT);
    let template = rng.categorical(&TEMPLATE_WEIGHTS);
    if template == 2 {
        let candidates: Vec<Camera> = Camera::ALL
            .into_iter()
            .filter(|&c| make_qa(scene, c, 2).is_some())
            .collect();
        if candidates.is_empty() {
            return (Camera::ALL[rng.below(6) as usize], 0);
        }
        return (candidates[rng.below(candidates.len() as u32) as usize], 2);
    }
    (Camera::ALL[rng.below(6) as usize], template)
}

/// Sentences covering every word any template can emit.
pub fn template_sentences() -> Vec<String> {
    let mut out = Vec::new();
    let mut items = Vec::new();
    for k in ObjectKind::ALL {
        for (n, w) in COUNT_WORDS.iter().enumerate().skip(1) {
            items.push(format!("{w} {}", k.noun(n > 1)));
        }
    }
    for cam in Camera::ALL {
        let pos = cam.phrase();
        out.push(format!("what are the important objects to the {pos}?"));
        out.push(format!("what should the ego vehicle do about the {pos}?"));
        out.push(format!("what is the pedestrian to the {pos} doing?"));
        out.push(format!("there are no important objects to the {pos}."));
        out.push(format!("there is {} to the {pos}.", join_list(&items)));
    }
    out.extend(PLANNING_ANSWERS.iter().map(|s| s.to_string()));
    out.extend(Motion::ALL.iter().map(|&m| pedestrian_answer(m).to_string()));
    out
}

pub fn sample_id(seed: u64) -> String {
    format!("{seed:016x}")
}

/// Builds the complete sample for `seed` at `size×size` pixels per view.
pub fn build_sample(seed: u64, size: usize) -> (Scene, Camera, SceneSample) {
    let scene = generate_scene(seed);
    let (cam, template) = choose_question(&scene);
    let qa = make_qa(&scene, cam, template).expect("chosen template applies");
    let sample = SceneSample {
        id: sample_id(seed),
        views: render_views(&scene, size),
        question: qa.question,
        answer: qa.answer,
        category: qa.category,
    };
    (scene, cam, sample)
}
