# dfiv/views/__init__.py
# Empty file to mark directory as Python package
