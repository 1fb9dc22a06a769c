use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The customized task set: for each teacher, the subset of its tasks the
/// student must serve. Entries are global label indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSelection {
    pub per_teacher: Vec<Vec<usize>>,
}

impl TaskSelection {
    pub fn new(per_teacher: Vec<Vec<usize>>) -> Self {
        TaskSelection { per_teacher }
    }

    /// Every task of every teacher.
    pub fn all(teacher_tasks: &[Vec<usize>]) -> Self {
        TaskSelection {
            per_teacher: teacher_tasks.to_vec(),
        }
    }

    /// `|C|`.
    pub fn total(&self) -> usize {
        self.per_teacher.iter().map(Vec::len).sum()
    }

    /// Selected tasks in teacher order, paired with their teacher index.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.per_teacher
            .iter()
            .enumerate()
            .flat_map(|(n, ts)| ts.iter().map(move |&t| (n, t)))
            .collect()
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.pairs().into_iter().map(|(_, t)| t).collect()
    }

    pub fn teacher_of(&self, task_id: usize) -> Option<usize> {
        self.pairs()
            .into_iter()
            .find(|&(_, t)| t == task_id)
            .map(|(n, _)| n)
    }

    /// Checks `C_n ⊆ A_n`, no repeats and `|C| > 0`.
    pub fn validate(&self, teacher_tasks: &[Vec<usize>]) -> Result<()> {
        if self.per_teacher.len() != teacher_tasks.len() {
            return Err(Error::Selection(format!(
                "selection lists {} teachers, registry has {}",
                self.per_teacher.len(),
                teacher_tasks.len()
            )));
        }
        if self.total() == 0 {
            return Err(Error::Selection("no task selected".into()));
        }
        for (n, (chosen, owned)) in self.per_teacher.iter().zip(teacher_tasks).enumerate() {
            for (i, t) in chosen.iter().enumerate() {
                if !owned.contains(t) {
                    return Err(Error::Selection(format!(
                        "task {t} is not served by teacher {n} (tasks {owned:?})"
                    )));
                }
                if chosen[..i].contains(t) {
                    return Err(Error::Selection(format!("task {t} selected twice")));
                }
            }
        }
        Ok(())
    }

    /// Parses `"n:i,n:j"` where `i` is the position of the task within
    /// teacher `n`'s own task list.
    pub fn parse(text: &str, teacher_tasks: &[Vec<usize>]) -> Result<Self> {
        let mut per_teacher = vec![Vec::new(); teacher_tasks.len()];
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (n, i) = item
                .split_once(':')
                .ok_or_else(|| Error::Selection(format!("'{item}' is not of the form n:i")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::Selection(format!("bad teacher index in '{item}'")))?;
            let i: usize = i
                .trim()
                .parse()
                .map_err(|_| Error::Selection(format!("bad task index in '{item}'")))?;
            let tasks = teacher_tasks
                .get(n)
                .ok_or_else(|| Error::Selection(format!("no teacher {n}")))?;
            let t = *tasks.get(i).ok_or_else(|| {
                Error::Selection(format!("teacher {n} has only {} tasks", tasks.len()))
            })?;
            per_teacher[n].push(t);
        }
        let sel = TaskSelection { per_teacher };
        sel.validate(teacher_tasks)?;
        Ok(sel)
    }
}
