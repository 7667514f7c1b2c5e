from esfp.cli import main

raise SystemExit(main())
