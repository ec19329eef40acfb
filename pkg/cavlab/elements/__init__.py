from cavlab.elements.classes import ClassDef, ClassTable, assign_classes
from cavlab.elements.concepts import all_concepts, concept_group
from cavlab.elements.dataset import GeneratedSplit, class_inputs, generate_dataset
from cavlab.elements.probes import ProbeDataset, build_probe, random_set
from cavlab.elements.render import render_image
from cavlab.elements.scene import sample_scene, stream

__all__ = [
    "ClassDef",
    "ClassTable",
    "GeneratedSplit",
    "ProbeDataset",
    "all_concepts",
    "assign_classes",
    "build_probe",
    "class_inputs",
    "concept_group",
    "generate_dataset",
    "random_set",
    "render_image",
    "sample_scene",
    "stream",
]
