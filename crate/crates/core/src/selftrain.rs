//! EMA teachers and pseudo-label generation.
//!
//! Two paradigms are supported. `decoder_only` keeps EMA copies of both
//! student decoders and labels target images by soft voting over
//! `H_S^te(F'_{S-t})` and `H_T^te(F'_{T-t})`, where the disentangled features
//! come from the student backbones and DDM. `single_target` keeps EMA copies
//! of the target backbone and target decoder; the target-style features come
//! from the teacher backbone, the source-style ones from the student, and the
//! label is the argmax of `H_T^te(F'_{T-t})`.
//!
//! Teachers are only ever assigned by the EMA recurrence
//! `phi <- alpha * phi + (1 - alpha) * theta`; no optimizer touches them, and
//! every pseudo-label is computed on detached tensors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::ddm;
use crate::error::{shape_err, Error, Result};
use crate::network::{soft_vote, Backbone, Decoder, StudentEnsemble, VoteMode};
use crate::nn::NamedParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    #[default]
    DecoderOnly,
    SingleTarget,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::DecoderOnly => "decoder_only",
            Paradigm::SingleTarget => "single_target",
        }
    }
}

/// Teacher networks; the variant fixes which components exist.
#[derive(Debug)]
pub enum TeacherNets {
    DecoderOnly {
        decoder_source: Box<dyn Decoder>,
        decoder_target: Box<dyn Decoder>,
    },
    SingleTarget {
        backbone_target: Box<dyn Backbone>,
        decoder_target: Box<dyn Decoder>,
    },
}

#[derive(Debug)]
pub struct TeacherState {
    pub nets: TeacherNets,
    pub alpha: f64,
    /// Number of EMA updates applied so far.
    pub step: u64,
    pub vote: VoteMode,
}

#[derive(Debug, Clone)]
pub struct PseudoLabel {
    /// `[B, H, W]` class ids (u32), every entry in `0..K`.
    pub labels: Tensor,
    /// Teacher step that produced the labels.
    pub source_step: u64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("EMA decay must lie in [0, 1], got {alpha}")))
    }
}

impl TeacherState {
    /// Teacher initialised as an exact copy of the matching student parts.
    pub fn from_students(paradigm: Paradigm, students: &StudentEnsemble, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let nets = match paradigm {
            Paradigm::DecoderOnly => TeacherNets::DecoderOnly {
                decoder_source: students.decoder_source.duplicate()?,
                decoder_target: students.decoder_target.duplicate()?,
            },
            Paradigm::SingleTarget => TeacherNets::SingleTarget {
                backbone_target: students.backbone_target.duplicate()?,
                decoder_target: students.decoder_target.duplicate()?,
            },
        };
        Ok(Self {
            nets,
            alpha,
            step: 0,
            vote: VoteMode::Probabilities,
        })
    }

    pub fn paradigm(&self) -> Paradigm {
        match self.nets {
            TeacherNets::DecoderOnly { .. } => Paradigm::DecoderOnly,
            TeacherNets::SingleTarget { .. } => Paradigm::SingleTarget,
        }
    }

    /// Teacher parameters, named after the student parameter they track
    /// with a `teacher.` prefix.
    pub fn params(&self) -> NamedParams {
        match &self.nets {
            TeacherNets::DecoderOnly {
                decoder_source,
                decoder_target,
            } => {
                let mut p = decoder_source.params("teacher.decoder_source");
                p.extend(decoder_target.params("teacher.decoder_target"));
                p
            }
            TeacherNets::SingleTarget {
                backbone_target,
                decoder_target,
            } => {
                let mut p = backbone_target.params("teacher.backbone_target");
                p.extend(decoder_target.params("teacher.decoder_target"));
                p
            }
        }
    }

    /// The student parameters this teacher follows, aligned with [`Self::params`].
    fn tracked(&self, students: &StudentEnsemble) -> NamedParams {
        match self.nets {
            TeacherNets::DecoderOnly { .. } => {
                let mut p = students.decoder_source.params("teacher.decoder_source");
                p.extend(students.decoder_target.params("teacher.decoder_target"));
                p
            }
            TeacherNets::SingleTarget { .. } => {
                let mut p = students.backbone_target.params("teacher.backbone_target");
                p.extend(students.decoder_target.params("teacher.decoder_target"));
                p
            }
        }
    }
}

/// One EMA step of every teacher tensor towards the current students.
pub fn ema_update(teacher: &mut TeacherState, students: &StudentEnsemble, alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    let ours = teacher.params();
    let theirs = teacher.tracked(students);
    if ours.len() != theirs.len() {
        return Err(shape_err(format!(
            "teacher has {} tensors, students {}",
            ours.len(),
            theirs.len()
        )));
    }
    for ((name, phi), (other, theta)) in ours.iter().zip(&theirs) {
        if name != other || phi.dims() != theta.dims() {
            return Err(shape_err(format!(
                "teacher tensor {name} {:?} does not match student {other} {:?}",
                phi.dims(),
                theta.dims()
            )));
        }
        let next = ((phi.as_tensor() * alpha)? + (theta.as_tensor().detach() * (1.0 - alpha))?)?;
        phi.set(&next)?;
    }
    teacher.step += 1;
    Ok(())
}

fn require(teacher: &TeacherState, expected: Paradigm) -> Result<()> {
    if teacher.paradigm() == expected {
        Ok(())
    } else {
        Err(Error::Paradigm {
            expected: expected.as_str(),
            found: teacher.paradigm().as_str(),
        })
    }
}

/// Voted teacher class scores for decoder-only labelling, `[B, K, H, W]`,
/// detached from every graph.
pub fn teacher_scores_decoder_only(
    teacher: &TeacherState,
    disentangled_source: &Tensor,
    disentangled_target: &Tensor,
    out_size: (usize, usize),
) -> Result<Tensor> {
    require(teacher, Paradigm::DecoderOnly)?;
    let TeacherNets::DecoderOnly {
        decoder_source,
        decoder_target,
    } = &teacher.nets
    else {
        unreachable!()
    };
    let a = decoder_source.forward(&disentangled_source.detach(), out_size)?.detach();
    let b = decoder_target.forward(&disentangled_target.detach(), out_size)?.detach();
    Ok(soft_vote(&a, &b, teacher.vote)?.detach())
}

/// Argmax of the soft vote of the two teacher decoders.
pub fn pseudo_label_decoder_only(
    teacher: &TeacherState,
    disentangled_source: &Tensor,
    disentangled_target: &Tensor,
    out_size: (usize, usize),
) -> Result<PseudoLabel> {
    let scores = teacher_scores_decoder_only(teacher, disentangled_source, disentangled_target, out_size)?;
    Ok(PseudoLabel {
        labels: scores.argmax(1)?,
        source_step: teacher.step,
    })
}

/// Teacher target-decoder logits for single-target labelling.
pub fn teacher_logits_single_target(
    teacher: &TeacherState,
    x_target: &Tensor,
    students: &StudentEnsemble,
) -> Result<Tensor> {
    let f_source_style = students.backbone_source.forward(&x_target.detach())?;
    teacher_logits_single_target_with(teacher, x_target, &f_source_style, &students.ddm)
}

/// As [`teacher_logits_single_target`], reusing already computed student
/// source-style features `F_{S-t}` of the same images.
pub fn teacher_logits_single_target_with(
    teacher: &TeacherState,
    x_target: &Tensor,
    f_source_style: &Tensor,
    ddm_params: &ddm::DdmParams,
) -> Result<Tensor> {
    require(teacher, Paradigm::SingleTarget)?;
    let TeacherNets::SingleTarget {
        backbone_target,
        decoder_target,
    } = &teacher.nets
    else {
        unreachable!()
    };
    let (_, _, h, w) = x_target.dims4()?;
    let f_target_style = backbone_target.forward(&x_target.detach())?.detach();
    let (_, disentangled_target) = ddm::ddm_forward(&f_source_style.detach(), &f_target_style, ddm_params)?;
    Ok(decoder_target.forward(&disentangled_target.detach(), (h, w))?.detach())
}

pub fn pseudo_label_single_target(
    teacher: &TeacherState,
    x_target: &Tensor,
    students: &StudentEnsemble,
) -> Result<PseudoLabel> {
    let logits = teacher_logits_single_target(teacher, x_target, students)?;
    Ok(PseudoLabel {
        labels: logits.argmax(1)?,
        source_step: teacher.step,
    })
}

/// Pseudo-labels for the paradigm in use, given the (student) target pass.
pub fn pseudo_label(
    teacher: &TeacherState,
    x_target: &Tensor,
    students: &StudentEnsemble,
    disentangled_target_domain: Option<(&Tensor, &Tensor)>,
) -> Result<PseudoLabel> {
    match teacher.paradigm() {
        Paradigm::DecoderOnly => {
            let (_, _, h, w) = x_target.dims4()?;
            match disentangled_target_domain {
                Some((ds, dt)) => pseudo_label_decoder_only(teacher, ds, dt, (h, w)),
                None => {
                    let features = students.extract_domain(&x_target.detach())?;
                    let (ds, dt) = ddm::ddm_forward(
                        &features.source_style.detach(),
                        &features.target_style.detach(),
                        &students.ddm,
                    )?;
                    pseudo_label_decoder_only(teacher, &ds, &dt, (h, w))
                }
            }
        }
        Paradigm::SingleTarget => pseudo_label_single_target(teacher, x_target, students),
    }
}

/// EMA update followed by pseudo-labelling of `x_target`.
pub fn self_training_round(
    teacher: &mut TeacherState,
    students: &StudentEnsemble,
    x_target: &Tensor,
) -> Result<PseudoLabel> {
    let alpha = teacher.alpha;
    ema_update(teacher, students, alpha)?;
    pseudo_label(teacher, x_target, students, None)
}
