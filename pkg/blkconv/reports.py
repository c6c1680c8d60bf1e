"""
Export of result tables (volumes, plans, traffic) to CSV, JSON and XLSX.
"""
import json
import logging
import os
from typing import Optional

from openpyxl import Workbook
from openpyxl.styles import Alignment, Font
from pandas import DataFrame


TABLE_FORMATS = ("csv", "json", "xlsx")


def frame_to_xlsx(frame: DataFrame, file_path: str, sheet_name: str,
                  widths: Optional[dict[str, int]] = None) -> None:
    """
    Export a DataFrame to an XLSX file.

    Args:
        frame: The table to export.
        file_path: Path to the output XLSX file.
        sheet_name: Name of the worksheet in the XLSX file.
        widths: A dictionary mapping column names to their widths. Any column not in
                this dictionary will be set to fit its content.
    """
    workbook = Workbook()
    sheet = workbook.active
    sheet.title = sheet_name
    headers = [str(column) for column in frame.columns]
    widths = widths or {}
    widths_idx = {headers.index(name): width for name, width in widths.items() if name in headers}
    sheet.append(headers)
    for cell in sheet[1]:
        cell.font = Font(bold=True, size=12)
        cell.alignment = Alignment(horizontal="center", vertical="center")
    for row in frame.itertuples(index=False):
        # openpyxl rejects numpy scalars
        sheet.append([value.item() if hasattr(value, "item") else value for value in row])
    logging.info("Exported %d rows to sheet %s", len(frame), sheet_name)
    for num, col in enumerate(sheet.columns):
        col_letter = col[0].column_letter
        if num in widths_idx:
            adjusted_width = widths_idx[num]
            for cell in col:
                cell.alignment = Alignment(wrap_text=True)
        else:
            max_length = max((len(str(cell.value)) for cell in col if cell.value is not None),
                             default=0)
            adjusted_width = max_length + 2
        sheet.column_dimensions[col_letter].width = adjusted_width
    workbook.save(file_path)
    logging.info("Written file: %s", file_path)


def table_format(file_path: str) -> str:
    """Format of a table file, from its extension (csv by default)."""
    extension = os.path.splitext(file_path)[1].lower().lstrip(".")
    return extension if extension in TABLE_FORMATS else "csv"


def frame_to_text(frame: DataFrame, fmt: str = "csv") -> str:
    """A table as CSV or as a JSON list of records."""
    if fmt == "csv":
        return frame.to_csv(index=False)
    if fmt == "json":
        return json.dumps(json.loads(frame.to_json(orient="records")), indent=2) + "\n"
    raise ValueError(f"Unknown table format {fmt}")


def write_table(frame: DataFrame, file_path: str, sheet_name: str = "Results",
                fmt: Optional[str] = None) -> None:
    """Write a table to a CSV, JSON or XLSX file; `fmt` defaults to the file extension."""
    fmt = fmt or table_format(file_path)
    if fmt == "xlsx":
        frame_to_xlsx(frame, file_path, sheet_name)
        return
    with open(file_path, "w", encoding="utf-8", newline="") as file:
        file.write(frame_to_text(frame, fmt))
    logging.info("Written file: %s", file_path)
