# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring
# pylint: disable=invalid-name,too-few-public-methods,protected-access
import json
import os
import tempfile

import pytest
from openpyxl import load_workbook
from pandas import DataFrame

from blkconv.reports import frame_to_text, frame_to_xlsx, table_format, write_table
from .conftest import file_path_in_testdir


def volumes() -> DataFrame:
    return DataFrame({"layer": ["conv1_1", "conv1_2", "conv2_1"],
                      "channels": [64, 64, 128],
                      "Mbit": [49.0, 49.0, 24.5]})


def test_frame_to_xlsx():
    # pylint: disable=consider-using-with  # Managing the file based on test outcome
    temp_file = tempfile.NamedTemporaryFile(delete=False, suffix=".xlsx",
                                            dir=file_path_in_testdir("."))
    temp_file.close()
    file_ok = False
    try:
        frame_to_xlsx(volumes(), temp_file.name, "Volumes", widths={"layer": 30})
        workbook = load_workbook(temp_file.name)
        sheet = workbook["Volumes"]
        rows = list(sheet.iter_rows(values_only=True))
        assert rows[0] == ("layer", "channels", "Mbit")
        assert rows[1] == ("conv1_1", 64, 49)
        assert rows[3] == ("conv2_1", 128, 24.5)
        assert sheet["A1"].font.bold
        assert sheet.column_dimensions["A"].width == 30
        assert sheet.column_dimensions["B"].width == len("channels") + 2
        file_ok = True
    finally:
        if os.path.exists(temp_file.name) and file_ok:
            os.remove(temp_file.name)
        else:
            print(f"Temporary file of failed test not deleted: {temp_file.name}")
    assert file_ok


def test_table_format():
    assert table_format("plans.xlsx") == "xlsx"
    assert table_format("plans.JSON") == "json"
    assert table_format("plans.csv") == "csv"
    assert table_format("plans.txt") == "csv"
    assert table_format("plans") == "csv"


def test_frame_to_text():
    text = frame_to_text(volumes(), "csv")
    assert text.splitlines() == ["layer,channels,Mbit", "conv1_1,64,49.0",
                                 "conv1_2,64,49.0", "conv2_1,128,24.5"]
    records = json.loads(frame_to_text(volumes(), "json"))
    assert records[2] == {"layer": "conv2_1", "channels": 128, "Mbit": 24.5}
    with pytest.raises(ValueError):
        frame_to_text(volumes(), "xml")


@pytest.mark.parametrize("name", ["table.csv", "table.json", "table.xlsx"])
def test_write_table(name):
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, name)
        write_table(volumes(), path, "Volumes")
        if name.endswith(".xlsx"):
            rows = list(load_workbook(path)["Volumes"].iter_rows(values_only=True))
            assert len(rows) == 4
        else:
            with open(path, "r", encoding="utf-8") as file:
                assert file.read() == frame_to_text(volumes(), table_format(path))


def test_write_table_forced_format():
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, "table.txt")
        write_table(volumes(), path, fmt="json")
        with open(path, "r", encoding="utf-8") as file:
            assert json.load(file)[0]["layer"] == "conv1_1"
