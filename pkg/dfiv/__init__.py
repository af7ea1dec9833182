# dfiv/__init__.py
# Deep feature instrumental variable regression toolkit
