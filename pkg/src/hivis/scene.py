from __future__ import annotations

from dataclasses import dataclass

from . import vocab

Cell = tuple[int, int] | None  # (shape id, color id) or empty


@dataclass(frozen=True)
class SceneSpec:
    """Grid of cells, each empty or holding one (shape, color) object.

    Shape and color ids index :data:`vocab.SHAPES` / :data:`vocab.COLORS`.
    Cells are stored row-major.
    """

    rows: int
    cols: int
    cells: tuple[Cell, ...]

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"scene grid must be at least 1x1, got {self.rows}x{self.cols}")
        if len(self.cells) != self.rows * self.cols:
            raise ValueError(f"expected {self.rows * self.cols} cells, got {len(self.cells)}")
        if all(c is None for c in self.cells):
            raise ValueError("scene has no objects")
        for c in self.cells:
            if c is None:
                continue
            s, col = c
            if not (0 <= s < len(vocab.SHAPES) and 0 <= col < len(vocab.COLORS)):
                raise ValueError(f"cell attribute out of range: {c}")

    def cell(self, r: int, c: int) -> Cell:
        return self.cells[r * self.cols + c]

    def find(self, shape: int) -> tuple[int, int, int] | None:
        """(row, col, color) of the first cell holding ``shape``."""
        for i, c in enumerate(self.cells):
            if c is not None and c[0] == shape:
                return i // self.cols, i % self.cols, c[1]
        return None

    def replace(self, index: int, cell: Cell) -> "SceneSpec":
        cells = list(self.cells)
        cells[index] = cell
        return SceneSpec(self.rows, self.cols, tuple(cells))
