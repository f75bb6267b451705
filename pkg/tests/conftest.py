import numpy as np
import pytest

from boxconsensus.core import Action, AnnotationEvent, BBox, ClassTaxonomy


def confirm(annotator, box_id, label, bbox=(10, 10, 50, 50), image_id=1, action=Action.CONFIRM):
    return AnnotationEvent(annotator, image_id, str(box_id), action, label, BBox(*bbox))


def delete(annotator, box_id, image_id=1):
    return AnnotationEvent(annotator, image_id, str(box_id), Action.DELETE)


def add(annotator, box_id, bbox, label=0, image_id=1):
    return AnnotationEvent(annotator, image_id, str(box_id), Action.ADD, label, BBox(*bbox))


@pytest.fixture
def uvh():
    return ClassTaxonomy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
