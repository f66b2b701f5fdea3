import ast
import unittest
from pathlib import Path
from typing import Iterator, List

from copaintlabTests.useful_test_util import ExtendedTestCase

ROOT = Path(__file__).resolve().parent.parent
BUILTIN_GENERICS = ('list', 'tuple', 'dict', 'set', 'frozenset', 'type')


def annotations(tree: ast.AST) -> Iterator[ast.expr]:
    for node in ast.walk(tree):
        if isinstance(node, ast.arg) and node.annotation is not None:
            yield node.annotation
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.returns is not None:
            yield node.returns
        elif isinstance(node, ast.AnnAssign):
            yield node.annotation


def builtin_subscripts(path: Path) -> List[str]:
    tree = ast.parse(path.read_text(encoding='utf-8'), filename=str(path))
    found = []
    for annotation in annotations(tree):
        for node in ast.walk(annotation):
            if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name) \
                    and node.value.id in BUILTIN_GENERICS:
                found.append(f'{path.relative_to(ROOT)}:{node.lineno} {node.value.id}[...]')
    return found


class AnnotationTests(ExtendedTestCase):
    def test_annotations__AllPackages__TypingGenericsOnly(self):
        # Arrange
        sources = sorted([*(ROOT / 'copaintlab').rglob('*.py'), *(ROOT / 'copaintlabTests').rglob('*.py')])

        # Act
        found = [hit for path in sources for hit in builtin_subscripts(path)]

        # Assert
        self.assertGreater(len(sources), 10)
        self.assertListEqual([], found)


if __name__ == '__main__':
    unittest.main()
