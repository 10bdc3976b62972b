from __future__ import annotations

from pathlib import Path

import pytest

from dpinstruct.core import Label, LabeledInstance, RecordInstance, Role, TaskKind
from dpinstruct.ingest import registry_lookup
from dpinstruct.knowledge import default_registry

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden"
BEER_MANIFEST = FIXTURES / "beer" / "manifest.yaml"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    results = item.config._criteria.setdefault(number, {"title": title, "ok": True, "ran": False})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        results["ran"] = True
        if report.outcome != "passed":
            results["ok"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        r = results[number]
        verdict = "PASS" if r["ok"] and r["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} - {r['title']}")


# -- shared instances -------------------------------------------------------


def adult_instance() -> LabeledInstance:
    attrs = (
        ("age", "18-21"), ("workclass", "Private"), ("education", "Some-college"),
        ("maritalstatus", "Never-married"), ("occupation", "Other-service"), ("relationship", "Own-child"),
        ("race", "White"), ("sex", "Male"), ("hoursperweek", "30"), ("country", "United-States"),
        ("income", "eLssThan50K"),
    )
    return LabeledInstance(RecordInstance(attrs), TaskKind.ED, Label.yes(), "income", "adult-0")


def restaurant_instance() -> LabeledInstance:
    attrs = (
        ("name", "darbar"), ("addr", "44 w. 56th st."), ("phone", "212-432-7227"),
        ("type", "indian"), ("city", "new york"),
    )
    return LabeledInstance(RecordInstance(attrs), TaskKind.DI, Label.of_value("new york"), "city", "restaurant-0")


def mimic_instance() -> LabeledInstance:
    left = (("name", "visit_occurrence-visit_end_date"),
            ("description", "the end date of the visit. if this is a one-day visit the end date should match the start date."))
    right = (("name", "admissions-dischtime"),
             ("description", "dischtime provides the date and time the patient was discharged from the hospital."))
    return LabeledInstance(RecordInstance(left, Role.PAIR, right), TaskKind.SM, Label.yes(), None, "mimic-0")


def beer_instance() -> LabeledInstance:
    left = (("name", "Sequoia American Amber Ale"), ("factory", "Wig And Pen"))
    right = (("name", "Aarhus Cains Triple A American Amber Ale"), ("factory", "Aarhus Bryghus"))
    return LabeledInstance(RecordInstance(left, Role.PAIR, right), TaskKind.EM, Label.no(), None, "beer-0")


def golden_cases():
    """(fixture name, instance, knowledge rules, wording params) for the four task-mode exemplars."""
    reg = default_registry()
    return [
        ("ed_adult", adult_instance(), [reg.get("ed.errors-record")], registry_lookup("adult").prompt),
        ("di_restaurant", restaurant_instance(), [], registry_lookup("restaurant").prompt),
        ("sm_mimic", mimic_instance(), [], registry_lookup("mimic-iii").prompt),
        ("em_beer", beer_instance(), [reg.get("em.missing-basis")], registry_lookup("beer").prompt),
    ]


@pytest.fixture
def beer_manifest() -> Path:
    return BEER_MANIFEST
